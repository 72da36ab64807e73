"""Pixel-wise classifier baselines: random forest, gradient boosting, MLP.

These treat every pixel as an independent sample with one feature per
channel, which is exactly what makes them a useful contrast to the U-Net
(no spatial context) and a cheap channel-importance probe.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier
from sklearn.inspection import permutation_importance
from sklearn.neural_network import MLPClassifier

from . import container
from .channels import ChannelSubsetSpec
from .errors import ConfigurationError, ValidationError
from .pipeline import MaskPatch, Patch, make_rng

CLASS_ORDER = ("background", "clean_ice", "debris")  # label codes 0, 1, 2

DEFAULT_HYPERPARAMS = {
    "random_forest": {"n_estimators": 100, "max_depth": None, "criterion": "gini"},
    "gradient_boosting": {"n_estimators": 100, "max_depth": 3, "learning_rate": 0.1},
    "mlp": {"hidden_layer_sizes": (64, 64), "activation": "relu", "max_iter": 300},
}


@dataclass
class PixelDataset:
    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,) int codes per CLASS_ORDER
    provenance: list[str]  # patch_id per row
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValidationError("features must be (N, F) aligned with labels")
        if np.isnan(self.features).any():
            raise ValidationError("NaN features: sample pixels after imputation")
        if len(self.feature_names) != self.features.shape[1]:
            raise ConfigurationError("feature_names do not match feature count")

    def class_counts(self) -> dict[str, int]:
        return {
            name: int((self.labels == code).sum())
            for code, name in enumerate(CLASS_ORDER)
        }


@dataclass
class ImportanceReport:
    importances: dict[str, float]

    def __post_init__(self):
        total = sum(self.importances.values())
        if any(v < 0 for v in self.importances.values()):
            raise ValidationError("importances must be nonnegative")
        if total > 0 and abs(total - 1.0) > 1e-6:
            raise ValidationError(f"importances sum to {total}, expected 1")

    @property
    def ordering(self) -> list[str]:
        return sorted(self.importances, key=self.importances.get, reverse=True)

    def to_csv(self) -> str:
        lines = ["channel,importance"]
        for name in self.ordering:
            lines.append(f"{name},{self.importances[name]}")
        return "\n".join(lines) + "\n"


@dataclass
class PixelModel:
    kind: str
    model: object
    feature_names: list[str]
    seed: int = 0
    hyperparams: dict = field(default_factory=dict)


def sample_pixels(
    patches: list[Patch],
    masks: list[MaskPatch],
    per_patch: int,
    seed: int = 0,
) -> PixelDataset:
    """Uniform without-replacement pixel sample from every patch.

    Patches with fewer pixels than per_patch contribute all of them.
    Deterministic for a fixed seed.
    """
    if not patches:
        raise ConfigurationError("no patches to sample from")
    if len(patches) != len(masks):
        raise ValidationError("patches and masks must align")
    rng = make_rng(seed)
    rows, labels, prov = [], [], []
    feature_names = list(patches[0].channels)
    for patch, mask in zip(patches, masks):
        if patch.channels != feature_names:
            raise ConfigurationError("all patches must share one channel order")
        if np.isnan(patch.data).any():
            raise ValidationError(
                f"patch {patch.meta.patch_id} has NaN cells; impute before sampling"
            )
        c, h, w = patch.data.shape
        n_px = h * w
        take = min(per_patch, n_px)
        idx = rng.choice(n_px, size=take, replace=False)
        flat = patch.data.reshape(c, n_px)
        rows.append(flat[:, idx].T)
        label_grid = np.zeros((h, w), dtype=np.int64)
        label_grid[mask.data[0] > 0] = 1
        label_grid[mask.data[1] > 0] = 2
        labels.append(label_grid.reshape(-1)[idx])
        prov.extend([patch.meta.patch_id] * take)
    return PixelDataset(
        features=np.concatenate(rows),
        labels=np.concatenate(labels),
        provenance=prov,
        feature_names=feature_names,
    )


def fit_pixel_classifier(
    ds: PixelDataset,
    kind: str = "random_forest",
    hyperparams: dict | None = None,
    seed: int = 0,
) -> PixelModel:
    """Train one of the baseline classifiers; deterministic given seed."""
    if kind not in DEFAULT_HYPERPARAMS:
        raise ConfigurationError(
            f"kind must be one of {sorted(DEFAULT_HYPERPARAMS)}, got {kind!r}"
        )
    if len(np.unique(ds.labels)) < 2:
        raise ValidationError("training needs at least 2 classes present")
    hp = dict(DEFAULT_HYPERPARAMS[kind])
    hp.update(hyperparams or {})
    if kind == "random_forest":
        model = RandomForestClassifier(random_state=seed, n_jobs=1, **hp)
    elif kind == "gradient_boosting":
        model = GradientBoostingClassifier(random_state=seed, **hp)
    else:
        model = MLPClassifier(random_state=seed, **hp)
    model.fit(ds.features, ds.labels)
    return PixelModel(
        kind=kind, model=model, feature_names=list(ds.feature_names),
        seed=seed, hyperparams=hp,
    )


def importance_report(
    model: PixelModel,
    ds: PixelDataset | None = None,
    method: str = "impurity",
    seed: int = 0,
) -> ImportanceReport:
    """Per-channel importances normalized to sum to 1.

    impurity: the forest's mean-decrease-in-impurity scores (RF/GBT only).
    permutation: model-agnostic score drop under feature shuffling
    (requires ds).
    """
    if method == "impurity":
        raw = getattr(model.model, "feature_importances_", None)
        if raw is None:
            raise ConfigurationError(f"{model.kind} has no impurity importances")
        values = np.asarray(raw, dtype=float)
    elif method == "permutation":
        if ds is None:
            raise ConfigurationError("permutation importance needs a dataset")
        result = permutation_importance(
            model.model, ds.features, ds.labels, n_repeats=5, random_state=seed
        )
        values = np.clip(result.importances_mean, 0.0, None)
    else:
        raise ConfigurationError(f"unknown importance method {method!r}")
    total = float(values.sum())
    if total > 0:
        values = values / total
    return ImportanceReport(dict(zip(model.feature_names, values.tolist())))


def select_by_importance(
    report: ImportanceReport, threshold: float = 0.05, label: str | None = None
) -> ChannelSubsetSpec:
    """Channels with importance strictly greater than the threshold,
    in descending importance order."""
    members = [n for n in report.ordering if report.importances[n] > threshold]
    if not members:
        raise ConfigurationError(
            f"no channel importance exceeds {threshold}; lower the threshold"
        )
    return ChannelSubsetSpec(label or f"rf_selected_gt{threshold:g}", members)


def predict_mask(model: PixelModel, patch: Patch) -> MaskPatch:
    """Classify every pixel independently; argmax with first-class tie-break
    (background < clean_ice < debris)."""
    if patch.channels != model.feature_names:
        raise ConfigurationError(
            f"patch channels {patch.channels} do not match model features "
            f"{model.feature_names}"
        )
    c, h, w = patch.data.shape
    flat = patch.data.reshape(c, h * w).T
    pred = np.asarray(model.model.predict(flat)).reshape(h, w)
    planes = np.stack([(pred == 1), (pred == 2)]).astype(np.uint8)
    return MaskPatch(planes, ["clean_ice", "debris"], patch.meta)


def save_pixel_model(model: PixelModel, path) -> None:
    header = {
        "kind": "pixel-model",
        "model_kind": model.kind,
        "feature_names": model.feature_names,
        "seed": model.seed,
        "hyperparams": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in model.hyperparams.items()},
    }
    container.write_file(path, header, pickle.dumps(model.model))


def load_pixel_model(path) -> PixelModel:
    header, payload = container.read_file(path)
    if header.get("kind") != "pixel-model":
        raise ValidationError(f"{path} is not a pixel model file")
    return PixelModel(
        kind=header["model_kind"],
        model=pickle.loads(payload),
        feature_names=list(header["feature_names"]),
        seed=header.get("seed", 0),
        hyperparams=header.get("hyperparams", {}),
    )
