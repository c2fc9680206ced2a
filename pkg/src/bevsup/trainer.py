"""Small numpy heads trained against the supervision losses.

Features stand in for language-model hidden states: a fixed random
orthonormal embedding of noisy observations of the BEV coordinates, their
sinusoidal encodings, (for situation samples) the heading's unit vector,
and one "quality" channel that exposes the per-token noise scale. The heads
must learn to decode position, heading and, through the Gaussian NLL, a
per-token uncertainty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .evaluation import LocalizationRecord, position_metrics, uncertainty_partition
from .losses import GaussPrediction, LossWeights, gnll, layout_loss, orientation_loss
from .orientation import OrientationCodec, decode_logits, wrap


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class ToyHead:
    """Linear map (``hidden=0``) or two-layer tanh perceptron with hand-written backprop."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.hidden, self.bias = in_dim, out_dim, hidden, bias
        self.params: dict[str, np.ndarray] = {}
        if hidden:
            self.params["W1"] = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(hidden, in_dim))
            if bias:
                self.params["b1"] = np.zeros(hidden)
            self.params["W2"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(out_dim, hidden))
        else:
            self.params["W2"] = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))
        if bias:
            self.params["b2"] = np.zeros(out_dim)

    def forward(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        p = self.params
        if self.hidden:
            pre = X @ p["W1"].T
            if self.bias:
                pre = pre + p["b1"]
            h = np.tanh(pre)
        else:
            h = X
        out = h @ p["W2"].T
        if self.bias:
            out = out + p["b2"]
        return out, (X, h)

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        X, h = cache
        p = self.params
        g = {"W2": grad_out.T @ h}
        if self.bias:
            g["b2"] = grad_out.sum(axis=0)
        if self.hidden:
            dpre = (grad_out @ p["W2"]) * (1.0 - h * h)
            g["W1"] = dpre.T @ X
            if self.bias:
                g["b1"] = dpre.sum(axis=0)
        return g

    def step(self, grads: dict[str, np.ndarray], lr: float, clip: float | None = None) -> None:
        """In-place descent step; ``clip`` caps the global gradient norm."""
        scale = 1.0
        if clip is not None:
            norm = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
            if norm > clip:
                scale = clip / norm
        for k, v in grads.items():
            self.params[k] = self.params[k] - (lr * scale) * v

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = vec[i:i + n].reshape(self.params[k].shape).copy()
            i += n

    def copy(self) -> "ToyHead":
        other = object.__new__(ToyHead)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def flat_grads(head: ToyHead, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in sorted(head.params)])


# -- tasks ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SynthFeatureTask:
    features: np.ndarray        # (N, D) per-sample (pooled) features
    positions: np.ndarray       # (N, 2) true BEV coordinates
    noise: np.ndarray           # (N,) injected noise scale
    yaws: np.ndarray | None     # (N,) or None for layout tokens
    noise_scales: tuple[float, ...]
    seed: int


@dataclass(frozen=True)
class TaskSpec:
    feature_dim: int = 24
    n_freq: int = 3
    extent: float = 0.5          # coordinates uniform in [-extent, extent]^2
    tokens_per_sample: int = 4   # situation samples mean-pool this many noisy tokens
    cue_scale: float = 0.05      # quality channel is log1p(noise / cue_scale)

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")


def _encode(p: np.ndarray, n_freq: int) -> list[np.ndarray]:
    cols = [p[:, 0], p[:, 1]]
    for k in range(n_freq):
        w = math.pi * 2.0 ** k
        cols += [np.sin(w * p[:, 0]), np.cos(w * p[:, 0]), np.sin(w * p[:, 1]), np.cos(w * p[:, 1])]
    return cols


def _embedding(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    if d_in > d_out:
        raise ValueError(f"feature_dim {d_out} too small for {d_in} base channels")
    q, _ = np.linalg.qr(rng.normal(size=(d_out, d_in)))
    return q


def make_task(n: int, seed: int, noise_scales=(0.0,), with_yaw: bool = False,
              spec: TaskSpec = TaskSpec(), embed_seed: int | None = None) -> SynthFeatureTask:
    """Sample ``n`` items; item i gets noise scale ``noise_scales[i % len]`` (meters).

    Each token observes its coordinates through isotropic Gaussian noise of
    that scale before encoding; situation items mean-pool several such tokens.
    ``embed_seed`` fixes the feature embedding independently of the sampled
    items, so train and held-out splits share it.
    """
    rng = np.random.default_rng(seed)
    erng = np.random.default_rng(seed if embed_seed is None else embed_seed)
    p = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
    scales = np.asarray(noise_scales, dtype=np.float64)
    s = scales[np.arange(n) % len(scales)]
    yaw = rng.uniform(-math.pi, math.pi, size=n) if with_yaw else None
    k = spec.tokens_per_sample if with_yaw else 1
    # centered over the level set so the cue does not act as a noise-weighted bias
    cue = np.log1p(s / spec.cue_scale) - np.log1p(scales / spec.cue_scale).mean()
    E = None
    feats = np.zeros((n, spec.feature_dim))
    for _ in range(k):
        observed = p + s[:, None] * rng.normal(size=(n, 2))
        cols = _encode(observed, spec.n_freq)
        if with_yaw:
            cols += [np.cos(yaw), np.sin(yaw)]
        cols.append(cue)
        base = np.stack(cols, axis=1)
        if E is None:
            E = _embedding(erng, spec.feature_dim, base.shape[1])
        feats += base @ E.T / k
    return SynthFeatureTask(feats, p, s, yaw, tuple(float(x) for x in scales), seed)


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    steps: int = 2000
    batch_size: int | None = None   # None: full batch
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    codec: OrientationCodec = field(default_factory=OrientationCodec)
    hidden: int = 64
    reduction: str = "mean"
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "steps": self.steps, "batch_size": self.batch_size, "seed": self.seed,
                "hidden": self.hidden, "reduction": self.reduction, "grad_clip": self.grad_clip,
                "weights": {"lambda_bev": self.weights.lambda_bev, "lambda_sit": self.weights.lambda_sit,
                            "lambda_ori": self.weights.lambda_ori},
                "codec": self.codec.header()}


def _position_head(in_dim: int, hidden: int, rng: np.random.Generator) -> ToyHead:
    head = ToyHead(in_dim, 4, hidden=hidden, rng=rng)
    head.params["W2"][2:] = 0.0   # start every token at unit variance
    return head


def _split_pos(out: np.ndarray) -> GaussPrediction:
    return GaussPrediction(out[:, :2], out[:, 2:4])


def _batches(rng: np.random.Generator, n: int, batch_size: int | None):
    if not batch_size or batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _check(value: float, step: int):
    if not math.isfinite(value):
        raise TrainingDivergedError(step, value)


def train_layout_head(task: SynthFeatureTask, config: TrainConfig, hidden: int = 0):
    """Gradient descent on the layout loss; the default head is a single linear layer."""
    rng = np.random.default_rng(config.seed)
    head = _position_head(task.features.shape[1], hidden, rng)
    curve = []
    for step in range(config.steps):
        idx = _batches(rng, len(task.features), config.batch_size)
        out, cache = head.forward(task.features[idx])
        rep = layout_loss(_split_pos(out), task.positions[idx])
        _check(rep.value, step)
        curve.append(rep.value)
        head.step(head.backward(cache, np.concatenate([rep.grad_mean, rep.grad_log_var], axis=1)),
                  config.lr, config.grad_clip)
    return head, np.array(curve)


def train_situation_heads(task: SynthFeatureTask, config: TrainConfig):
    """Joint descent on L_pos + lambda_ori * L_ori with two-layer heads.

    Returns (position head, orientation head, curves) where curves holds the
    "total", "pos" and "ori" per-step values.
    """
    if task.yaws is None:
        raise ValueError("situation training needs yaw targets")
    rng = np.random.default_rng(config.seed)
    d = task.features.shape[1]
    pos_head = _position_head(d, config.hidden, rng)
    ori_head = ToyHead(d, config.codec.n_bins, hidden=config.hidden, rng=rng)
    lam = config.weights.lambda_ori
    curves = {"total": [], "pos": [], "ori": []}
    for step in range(config.steps):
        idx = _batches(rng, len(task.features), config.batch_size)
        X = task.features[idx]
        pos_out, pos_cache = pos_head.forward(X)
        ori_out, ori_cache = ori_head.forward(X)
        lp = gnll(_split_pos(pos_out), task.positions[idx], config.reduction)
        lo = orientation_loss(ori_out, task.yaws[idx], config.codec, config.reduction)
        total = lp.value + lam * lo.value
        _check(total, step)
        curves["total"].append(total)
        curves["pos"].append(lp.value)
        curves["ori"].append(lo.value)
        pos_head.step(pos_head.backward(pos_cache, np.concatenate([lp.grad_mean, lp.grad_log_var], axis=1)),
                      config.lr, config.grad_clip)
        if lam > 0:
            ori_head.step(ori_head.backward(ori_cache, lam * lo.grad_logits), config.lr, config.grad_clip)
    return pos_head, ori_head, {k: np.array(v) for k, v in curves.items()}


# -- evaluation helpers --------------------------------------------------------

def predict_positions(head: ToyHead, features) -> GaussPrediction:
    return _split_pos(head(features))


def position_rmse(head: ToyHead, task: SynthFeatureTask) -> float:
    pred = predict_positions(head, task.features)
    return float(np.sqrt(np.mean(np.sum((pred.mean - task.positions) ** 2, axis=1))))


def predict_yaws(head: ToyHead, features, codec: OrientationCodec) -> np.ndarray:
    return np.array([decode_logits(z, codec) for z in head(features)])


def angular_errors_deg(head: ToyHead, task: SynthFeatureTask, codec: OrientationCodec) -> np.ndarray:
    return np.degrees(np.abs(wrap(predict_yaws(head, task.features, codec) - task.yaws)))


# -- gradient checking ---------------------------------------------------------

def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def central_difference_batched(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
    """Same as :func:`central_difference` for ``f`` mapping a (k, p) stack of points to (k,) values."""
    x = np.asarray(x, dtype=np.float64).ravel()
    E = h * np.eye(x.size)
    vals = np.asarray(f(np.concatenate([x + E, x - E])), dtype=np.float64)
    return (vals[:x.size] - vals[x.size:]) / (2 * h)


def head_loss(kind: str, codec: OrientationCodec | None = None):
    """(value, grad w.r.t. head output) closure for ``kind`` in {"gnll", "orientation"}."""
    if kind == "gnll":
        def fn(out, target):
            rep = gnll(_split_pos(out), target)
            return rep.value, np.concatenate([rep.grad_mean, rep.grad_log_var], axis=1)
    elif kind == "orientation":
        codec = codec or OrientationCodec()

        def fn(out, target):
            rep = orientation_loss(out, target, codec)
            return rep.value, rep.grad_logits
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return fn


def grad_check(head: ToyHead, loss: Callable, samples, h: float = 1e-6) -> float:
    """Relative error between backprop and central differences over all head parameters.

    ``loss(out, target) -> (value, d value / d out)``; ``samples`` is (X, target).
    """
    X, target = samples
    out, cache = head.forward(X)
    _, g_out = loss(out, target)
    analytic = flat_grads(head, head.backward(cache, g_out))
    probe = head.copy()

    def f(theta):
        probe.set_flat(theta)
        return loss(probe(X), target)[0]

    numeric = central_difference(f, head.flat(), h)
    return relative_error(analytic, numeric)


# -- end-to-end run ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    n_train: int = 512
    n_test: int = 256
    noise_scales: tuple[float, ...] = (0.0,)
    task: TaskSpec = field(default_factory=TaskSpec)
    situation_steps: int | None = None   # None: same as the config

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_test": self.n_test, "noise_scales": list(self.noise_scales),
                "task": {"feature_dim": self.task.feature_dim, "n_freq": self.task.n_freq,
                         "extent": self.task.extent, "tokens_per_sample": self.task.tokens_per_sample,
                         "cue_scale": self.task.cue_scale},
                "situation_steps": self.situation_steps}


def _spearman(a, b) -> float | None:
    from scipy.stats import spearmanr
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b)[0])


def _sigma_summary(noise: np.ndarray, sigma: np.ndarray, scales) -> dict:
    return {"spearman_noise_sigma": _spearman(noise, sigma),
            "mean_sigma_by_noise": {repr(float(s)): float(sigma[noise == s].mean()) for s in scales}}


def run_toy_experiment(config: TrainConfig, exp: ExperimentSpec = ExperimentSpec()) -> tuple[dict, dict]:
    """Train both heads on seeded tasks and score them on held-out samples.

    Seeds: training items use ``config.seed``, held-out items ``config.seed + 1``,
    and both share the embedding drawn from ``config.seed``. Returns
    (metrics, curves).
    """
    seed = config.seed
    lay_train = make_task(exp.n_train, seed, exp.noise_scales, False, exp.task, embed_seed=seed)
    lay_test = make_task(exp.n_test, seed + 1, exp.noise_scales, False, exp.task, embed_seed=seed)
    sit_train = make_task(exp.n_train, seed, exp.noise_scales, True, exp.task, embed_seed=seed)
    sit_test = make_task(exp.n_test, seed + 1, exp.noise_scales, True, exp.task, embed_seed=seed)

    layout_head, layout_curve = train_layout_head(lay_train, config)
    sit_cfg = config if exp.situation_steps is None else replace(config, steps=exp.situation_steps)
    pos_head, ori_head, sit_curves = train_situation_heads(sit_train, sit_cfg)

    lay_pred = predict_positions(layout_head, lay_test.features)
    pos_pred = predict_positions(pos_head, sit_test.features)
    yaw = predict_yaws(ori_head, sit_test.features, config.codec)
    ang = np.degrees(np.abs(wrap(yaw - sit_test.yaws)))
    records = [LocalizationRecord(f"toy_{i:05d}", (float(pos_pred.mean[i, 0]), float(pos_pred.mean[i, 1])),
                                  (float(pos_pred.log_var[i, 0]), float(pos_pred.log_var[i, 1])), float(yaw[i]),
                                  (float(sit_test.positions[i, 0]), float(sit_test.positions[i, 1])),
                                  float(sit_test.yaws[i]))
               for i in range(len(yaw))]
    lay_sigma = np.linalg.norm(lay_pred.sigma, axis=1)
    sit_sigma = np.array([r.sigma_pos for r in records])
    metrics = {
        "layout": {"rmse_m": position_rmse(layout_head, lay_test),
                   "final_loss": float(layout_curve[-1]),
                   **_sigma_summary(lay_test.noise, lay_sigma, exp.noise_scales)},
        "situation": {"rmse_m": position_rmse(pos_head, sit_test),
                      "median_ang_err_deg": float(np.median(ang)),
                      "final_loss": float(sit_curves["total"][-1]),
                      **_sigma_summary(sit_test.noise, sit_sigma, exp.noise_scales)},
        "localization": position_metrics(records).to_dict(),
        "partition": uncertainty_partition(records).to_dict(),
    }
    curves = {"layout": {"loss": layout_curve}, "situation": sit_curves}
    return metrics, curves
