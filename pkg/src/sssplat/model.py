"""Estimator facade: fit a relightable scene to an OLAT dataset, predict
images for (camera, light) queries.

Follows the scikit-learn parameter conventions (constructor args mirror
the training configuration, ``get_params``/``set_params`` work, ``fit``
returns self) so the reconstruction step drops into existing tooling.
"""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import OlatDataset, evaluate, load_dataset
from .pipeline import RenderOptions, render
from .relight import MaterialEdit
from .train import LossWeights, TrainConfig, train


class NotFittedError(RuntimeError):
    pass


class SubsurfaceSplatModel(BaseEstimator):
    """Reconstructs shape, PBR materials and a scattering residual from
    one-light-at-a-time images; predicts relit novel views.

    Parameters mirror the training configuration; see ``TrainConfig``.
    """

    def __init__(self, total_steps=60000, lr=0.001, lr_decay=0.99,
                 lr_decay_every=1000, mlp_lr_gamma=0.9999,
                 incident_ramp_end=7000, roughness_freeze_until=10000,
                 eval_every=500, seed=0, deferred=True, use_residual=True,
                 use_pbr=True, joint_mlp=True, densify=True,
                 use_enhance=False, use_lpips=False):
        self.total_steps = total_steps
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.mlp_lr_gamma = mlp_lr_gamma
        self.incident_ramp_end = incident_ramp_end
        self.roughness_freeze_until = roughness_freeze_until
        self.eval_every = eval_every
        self.seed = seed
        self.deferred = deferred
        self.use_residual = use_residual
        self.use_pbr = use_pbr
        self.joint_mlp = joint_mlp
        self.densify = densify
        self.use_enhance = use_enhance
        self.use_lpips = use_lpips

    # ------------------------------------------------------------------ api
    def _config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps, lr=self.lr, lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            mlp_lr_gamma=self.mlp_lr_gamma,
            incident_ramp_end=self.incident_ramp_end,
            roughness_freeze_until=self.roughness_freeze_until,
            eval_every=self.eval_every, seed=self.seed,
            deferred=self.deferred, use_residual=self.use_residual,
            use_pbr=self.use_pbr, joint_mlp=self.joint_mlp,
            densify=self.densify, use_enhance=self.use_enhance,
            use_lpips=self.use_lpips, weights=LossWeights())

    @staticmethod
    def _as_dataset(X) -> OlatDataset:
        if isinstance(X, OlatDataset):
            return X
        return load_dataset(X)

    def fit(self, X, y=None, scene=None, params=None, out_dir=None):
        """Optimize against ``X`` (an ``OlatDataset`` or a manifest path)."""
        dataset = self._as_dataset(X)
        self.scene_, self.params_, trainer = train(
            dataset, self._config(), out_dir=out_dir, scene=scene,
            params=params)
        self.metrics_ = trainer.metrics
        return self

    def _require_fitted(self):
        if not hasattr(self, "scene_"):
            raise NotFittedError("call fit() or load() first")

    def predict(self, X, edit: MaterialEdit | None = None):
        """Render queries: an iterable of (camera, light) pairs or
        ``FrameData``; returns a list of linear RGB images."""
        self._require_fitted()
        options = RenderOptions(deferred=self.deferred,
                                use_residual=self.use_residual,
                                use_pbr=self.use_pbr)
        out = []
        for item in X:
            camera, light = (item.camera, item.light) if hasattr(item, "camera") \
                else item
            out.append(render(
                self.scene_, self.params_, camera, light, options=options,
                want_grad=False,
                edit=edit if edit and not edit.is_identity() else None).image)
        return out

    def score(self, X, y=None, split: str = "test") -> float:
        """Mean held-out PSNR in dB (higher is better)."""
        self._require_fitted()
        dataset = self._as_dataset(X)

        def render_fn(camera, light):
            return render(self.scene_, self.params_, camera, light,
                          want_grad=False).image

        agg, _ = evaluate(render_fn, dataset, split)
        return agg["psnr"]

    # ------------------------------------------------------------- persistence
    def save(self, path) -> "SubsurfaceSplatModel":
        self._require_fitted()
        save_checkpoint(Path(path), self.scene_, self.params_)
        return self

    def load(self, path) -> "SubsurfaceSplatModel":
        self.scene_, self.params_ = load_checkpoint(Path(path))
        return self
