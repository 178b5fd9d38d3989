import { mountViewer } from "./viewer.js";

const params = new URLSearchParams(window.location.search);
const service = params.get("service") ?? "http://127.0.0.1:8000";
const root = document.getElementById("app");
if (root) {
  mountViewer(root, service).catch((err) => console.error(err));
}
