"""Shrinkage-LDA training, channel-count grid search, ROC thresholding
and model persistence.

The classifier is a two-class linear discriminant with the pooled
covariance shrunk towards a scaled identity by the closed-form
Ledoit-Wolf coefficient, which keeps the estimate well conditioned at
the small sample sizes a single session provides.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import IDLE, PRE_MOVEMENT, FilterSpec
from .errors import DataFormatError, ParameterError, TrainingError

CHANNEL_GRID = tuple(range(6, 21, 2))
TARGET_FPR = 0.15
LABEL_ORDER = (IDLE, PRE_MOVEMENT)  # class 0, class 1


def lw_covariance(X: np.ndarray) -> np.ndarray:
    """Ledoit-Wolf shrunk covariance of the rows of ``X``.

    Returns ``(1 - lam) * S + lam * (tr(S)/d) * I`` with the shrinkage
    intensity from the closed-form estimator. A ridge floor of
    ``1e-9 * tr(S)/d + 1e-12`` is added only when the result would be
    singular (e.g. zero-variance input), keeping it positive-definite.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ParameterError(f"expected an n x d matrix, got shape {X.shape}")
    n, d = X.shape
    if d == 0:
        raise ParameterError("feature dimension must be positive")
    if n < 2:
        raise ParameterError(f"need at least 2 samples, got {n}")

    Xc = X - X.mean(axis=0)
    S = (Xc.T @ Xc) / n
    mu = np.trace(S) / d
    delta2 = np.sum((S - mu * np.eye(d)) ** 2) / d
    # sum_k ||x_k x_k' - S||_F^2 = sum_k ||x_k||^4 - n ||S||_F^2
    sq_norms = np.sum(Xc**2, axis=1)
    beta_bar2 = (np.sum(sq_norms**2) - n * np.sum(S**2)) / (d * n**2)
    beta2 = min(beta_bar2, delta2)
    lam = beta2 / delta2 if delta2 > 0 else 0.0

    sigma = (1.0 - lam) * S + lam * mu * np.eye(d)
    eps = 1e-9 * mu + 1e-12
    if np.linalg.eigvalsh(sigma)[0] <= eps:
        sigma = sigma + eps * np.eye(d)
    return sigma


@dataclass
class LdaParams:
    """Fitted discriminant: class means, shrunk covariance, weights."""

    mean_idle: np.ndarray
    mean_premove: np.ndarray
    covariance: np.ndarray
    w: np.ndarray
    b: float

    @property
    def n_features(self) -> int:
        return self.w.shape[0]


def lda_train(X: np.ndarray, y: np.ndarray) -> LdaParams:
    """Fit the shrinkage LDA on features ``X`` with labels ``y`` (0/1).

    The covariance pools both classes after centering each by its own
    mean. The bias includes the log prior ratio so the posterior is the
    logistic of ``w @ x + b``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ParameterError(f"X {X.shape} and y {y.shape} do not align")
    n0, n1 = int(np.sum(y == 0)), int(np.sum(y == 1))
    if n0 == 0 or n1 == 0:
        raise TrainingError("both classes must be present in the training labels")
    mu0 = X[y == 0].mean(axis=0)
    mu1 = X[y == 1].mean(axis=0)
    pooled = np.concatenate([X[y == 0] - mu0, X[y == 1] - mu1], axis=0)
    sigma = lw_covariance(pooled)
    w = np.linalg.solve(sigma, mu1 - mu0)
    b = float(-w @ (mu1 + mu0) / 2.0 + np.log(n1 / n0))
    return LdaParams(mean_idle=mu0, mean_premove=mu1, covariance=sigma, w=w, b=b)


def predict_proba(params: LdaParams, x: np.ndarray) -> np.ndarray | float:
    """Posterior probability of the pre-movement class.

    Accepts a single feature vector or an ``(n, d)`` batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != params.n_features:
        raise ParameterError(
            f"feature length {x.shape[-1]} does not match model ({params.n_features})"
        )
    z = x @ params.w + params.b
    # numerically stable logistic
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return float(out) if single else out


def predict_label(params: LdaParams, x: np.ndarray) -> np.ndarray:
    p = predict_proba(params, x)
    return (np.asarray(p) > 0.5).astype(int)


def stratified_folds(y: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Deterministic stratified fold assignment (one fold id per sample)."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.shape[0], dtype=int)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.size < n_folds:
            raise TrainingError(
                f"class {cls} has {idx.size} samples, fewer than {n_folds} folds"
            )
        rng.shuffle(idx)
        assignment[idx] = np.arange(idx.size) % n_folds
    return assignment


@dataclass
class GridSearchResult:
    chosen_k: int
    mean_accuracy: dict[int, float]
    fold_accuracies: dict[int, list[float]]
    oof_scores: np.ndarray
    oof_labels: np.ndarray
    fold_assignment: np.ndarray


def cv_grid_search(
    features: np.ndarray,
    labels: np.ndarray,
    grid: tuple[int, ...] = CHANNEL_GRID,
    n_folds: int = 5,
    seed: int = 0,
) -> GridSearchResult:
    """Pick the channel count by stratified cross-validated accuracy.

    ``features`` holds slope features for the maximal ranked prefix
    (columns ordered best channel first); candidate ``k`` uses the first
    ``k`` columns. Ties go to the smaller ``k``. Out-of-fold posterior
    scores at the chosen ``k`` are returned for threshold selection.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    ks = [k for k in grid if k <= features.shape[1]]
    if not ks:
        raise TrainingError(
            f"no grid point fits {features.shape[1]} available channels (grid {grid})"
        )
    folds = stratified_folds(labels, n_folds, seed)

    mean_acc: dict[int, float] = {}
    fold_acc: dict[int, list[float]] = {}
    oof_by_k: dict[int, np.ndarray] = {}
    for k in ks:
        Xk = features[:, :k]
        accs = []
        oof = np.empty(labels.shape[0])
        for f in range(n_folds):
            train, val = folds != f, folds == f
            params = lda_train(Xk[train], labels[train])
            scores = predict_proba(params, Xk[val])
            pred = (np.asarray(scores) > 0.5).astype(int)
            accs.append(float(np.mean(pred == labels[val])))
            oof[val] = scores
        fold_acc[k] = accs
        mean_acc[k] = float(np.mean(accs))
        oof_by_k[k] = oof

    means = np.array([mean_acc[k] for k in ks])
    chosen = ks[int(np.argmax(means))]  # first max -> smallest k on ties
    return GridSearchResult(
        chosen_k=chosen,
        mean_accuracy=mean_acc,
        fold_accuracies=fold_acc,
        oof_scores=oof_by_k[chosen],
        oof_labels=labels.copy(),
        fold_assignment=folds,
    )


@dataclass
class RocCurve:
    """Operating points swept over all distinct score thresholds.

    ``points`` is ``(n, 3)``: false positive rate, true positive rate and
    the score threshold realizing them (prediction is positive when
    ``score >= threshold``). Rates are non-decreasing along the curve,
    from (0, 0) to (1, 1).
    """

    points: np.ndarray

    @property
    def fpr(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def tpr(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def thresholds(self) -> np.ndarray:
        return self.points[:, 2]

    def auc(self) -> float:
        return float(np.trapz(self.tpr, self.fpr))


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ParameterError("scores and labels must be equal-length vectors")
    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n0 == 0 or n1 == 0:
        raise ParameterError("both classes must be present to build a ROC curve")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = (labels[order] == 1).astype(np.float64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1.0 - pos)
    distinct = np.r_[s[1:] != s[:-1], True]  # last index of each score value

    fpr = np.r_[0.0, fp[distinct] / n0]
    tpr = np.r_[0.0, tp[distinct] / n1]
    thr = np.r_[np.nextafter(s[0], np.inf), s[distinct]]
    return RocCurve(points=np.column_stack([fpr, tpr, thr]))


def threshold_at_fpr(curve: RocCurve, target_fpr: float = TARGET_FPR) -> float:
    """Most permissive score threshold whose empirical FPR stays at or
    below the target."""
    ok = curve.fpr <= target_fpr
    idx = int(np.flatnonzero(ok)[-1])  # thresholds descend along the curve
    return float(curve.thresholds[idx])


def f1_score(predictions: np.ndarray, labels: np.ndarray) -> float:
    """F1 of the pre-movement (positive) class; 0 when degenerate."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ParameterError("predictions and labels must be equal-length and non-empty")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class IntentModel:
    """The deployable artifact: filter, channel prefix, LDA and threshold."""

    filter: FilterSpec
    channels: list[str]
    lda: LdaParams
    threshold: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        if len(self.channels) != self.lda.n_features:
            raise ParameterError(
                f"{len(self.channels)} channels but LDA expects {self.lda.n_features} features"
            )


MODEL_MAGIC = "INTENTMODEL 1"


def _encode_array(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a, dtype="<f8")
    shape = ",".join(str(s) for s in a.shape)
    return f"{shape}:{base64.b64encode(a.tobytes()).decode('ascii')}"


def _decode_array(text: str) -> np.ndarray:
    shape_s, payload = text.split(":", 1)
    shape = tuple(int(s) for s in shape_s.split(",") if s)
    raw = base64.b64decode(payload.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(model: IntentModel, path: str | Path) -> None:
    """Versioned text format: header fields, then base64 float64 matrices.

    Round-tripping a file through load/save reproduces it byte for byte.
    """
    lines = [MODEL_MAGIC]
    f = model.filter
    lines.append(f"filter_low_hz={f.low_hz!r}")
    lines.append(f"filter_high_hz={f.high_hz!r}")
    lines.append(f"filter_rate={f.rate!r}")
    lines.append(f"filter_order={f.order}")
    lines.append(f"channels={','.join(model.channels)}")
    lines.append(f"threshold={model.threshold!r}")
    for key in sorted(model.metadata):
        lines.append(f"meta.{key}={model.metadata[key]}")
    lines.append(f"array.sos={_encode_array(f.sos)}")
    lines.append(f"array.mean_idle={_encode_array(model.lda.mean_idle)}")
    lines.append(f"array.mean_premove={_encode_array(model.lda.mean_premove)}")
    lines.append(f"array.covariance={_encode_array(model.lda.covariance)}")
    lines.append(f"array.w={_encode_array(model.lda.w)}")
    lines.append(f"array.b={_encode_array(np.array([model.lda.b]))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> IntentModel:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model file (missing {MODEL_MAGIC!r} header)")
    fields: dict[str, str] = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise DataFormatError(f"{path}: malformed line {ln!r}")
        key, value = ln.split("=", 1)
        fields[key] = value
    try:
        sos = _decode_array(fields["array.sos"])
        spec = FilterSpec(
            low_hz=float(fields["filter_low_hz"]),
            high_hz=float(fields["filter_high_hz"]),
            rate=float(fields["filter_rate"]),
            order=int(fields["filter_order"]),
            kind="band-pass",
            sos=sos,
            initial_state=np.zeros((sos.shape[0], 2)),
        )
        lda = LdaParams(
            mean_idle=_decode_array(fields["array.mean_idle"]),
            mean_premove=_decode_array(fields["array.mean_premove"]),
            covariance=_decode_array(fields["array.covariance"]),
            w=_decode_array(fields["array.w"]),
            b=float(_decode_array(fields["array.b"])[0]),
        )
        channels = fields["channels"].split(",") if fields["channels"] else []
        metadata = {k[len("meta.") :]: v for k, v in fields.items() if k.startswith("meta.")}
        return IntentModel(
            filter=spec,
            channels=channels,
            lda=lda,
            threshold=float(fields["threshold"]),
            metadata=metadata,
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing field {exc}") from None
