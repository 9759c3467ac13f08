"""Score-based two-branch heatmap fusion.

A binary classifier looks at summary features of both branches and returns
the probability that the first branch is the more reliable one; the
heatmaps are then blended with that probability.  Training labels come from
the per-frame errors of the two branches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .heatmap import HeatmapStack, render_grids, soft_argmax_coords

FEATURE_STATS = ("peak", "entropy", "sharpness")


# --------------------------------------------------------------------------
# label rule and fusion


def fusion_label(err_first, err_second):
    """1 when the first branch's error is lower (ties count as 1), else 0."""
    for e in (err_first, err_second):
        if not e >= 0:  # also rejects NaN
            raise ValueError(f"branch errors must be nonnegative numbers, got {e!r}")
    return 0 if err_first > err_second else 1


def fuse(score, h_first: HeatmapStack, h_second: HeatmapStack) -> HeatmapStack:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
    if not h_first.compatible(h_second):
        raise ValueError("heatmap stacks differ in shape, stride or origin")
    grids = score * h_first.grids + (1.0 - score) * h_second.grids
    return HeatmapStack(grids, h_first.stride, h_first.origin)


# --------------------------------------------------------------------------
# branch features


def branch_features(grids, window=2):
    """Per-joint (peak, normalized entropy, peak sharpness), flattened joint-major.

    grids: (..., N_J, H, W).  Sharpness is the share of total mass inside a
    (2*window+1)^2 box around the maximum.
    """
    g = np.asarray(grids, dtype=float)
    H, W = g.shape[-2:]
    flat = g.reshape(g.shape[:-2] + (H * W,))
    peak = flat.max(axis=-1)
    total = flat.sum(axis=-1)
    safe_total = np.where(total > 0, total, 1.0)
    p = flat / safe_total[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = np.where(total > 0, -plogp.sum(axis=-1) / math.log(H * W), 1.0)

    idx = flat.argmax(axis=-1)
    r, c = np.divmod(idx, W)
    rows = np.arange(H)
    cols = np.arange(W)
    in_r = np.abs(rows - r[..., None]) <= window
    in_c = np.abs(cols - c[..., None]) <= window
    box = (g * in_r[..., :, None] * in_c[..., None, :]).sum(axis=(-2, -1))
    sharp = np.where(total > 0, box / safe_total, 0.0)
    feats = np.stack([peak, entropy, sharp], axis=-1)  # (..., N_J, 3)
    return feats.reshape(feats.shape[:-2] + (-1,))


# --------------------------------------------------------------------------
# classifier


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FusionClassifier:
    """Intra-branch softmax attention over per-joint feature groups, a
    bilinear cross-branch gate, and a one-hidden-layer head.

    Features are standardized with ``mean``/``std`` shared by both branches.
    """

    n_groups: int
    group_size: int
    hidden: int
    mean: np.ndarray
    std: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def feature_dim(self):
        return self.n_groups * self.group_size

    @classmethod
    def init(cls, n_groups, group_size=3, hidden=16, seed=0, mean=None, std=None):
        rng = np.random.default_rng(seed)
        D, S = n_groups * group_size, group_size
        zin = 2 * D + 3 * S
        params = {
            "u_first": 0.1 * rng.standard_normal(S),
            "u_second": 0.1 * rng.standard_normal(S),
            "gate_w": 0.1 * rng.standard_normal((S, S)),
            "gate_b": np.zeros(1),
            "w1": rng.standard_normal((hidden, zin)) * math.sqrt(1.0 / zin),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal(hidden) * math.sqrt(1.0 / hidden),
            "b2": np.zeros(1),
        }
        mean = np.zeros(D) if mean is None else np.asarray(mean, float)
        std = np.ones(D) if std is None else np.asarray(std, float)
        return cls(n_groups, group_size, hidden, mean, std, params)

    @classmethod
    def zeros(cls, n_groups, group_size=3, hidden=16):
        clf = cls.init(n_groups, group_size, hidden)
        clf.params = {k: np.zeros_like(v) for k, v in clf.params.items()}
        return clf

    # forward / backward --------------------------------------------------

    def _attend(self, x, u):
        groups = x.reshape(x.shape[0], self.n_groups, self.group_size)
        scores = groups @ u
        scores = scores - scores.max(axis=1, keepdims=True)
        alpha = np.exp(scores)
        alpha /= alpha.sum(axis=1, keepdims=True)
        pooled = np.einsum("bk,bks->bs", alpha, groups)
        return groups, alpha, pooled

    def forward(self, f_first, f_second):
        P = self.params
        xa = (np.atleast_2d(f_first) - self.mean) / self.std
        xb = (np.atleast_2d(f_second) - self.mean) / self.std
        ga, aa, qa = self._attend(xa, P["u_first"])
        gb, ab, qb = self._attend(xb, P["u_second"])
        bil = np.einsum("bs,st,bt->b", qa, P["gate_w"], qb) + P["gate_b"][0]
        gate = _sigmoid(bil)
        m = gate[:, None] * (qa - qb)
        z = np.concatenate([xa, xb, qa, qb, m], axis=1)
        h = np.tanh(z @ P["w1"].T + P["b1"])
        logit = h @ P["w2"] + P["b2"][0]
        cache = (ga, aa, qa, gb, ab, qb, gate, z, h)
        return logit, cache

    def backward(self, dlogit, cache):
        P = self.params
        ga, aa, qa, gb, ab, qb, gate, z, h = cache
        D, S = self.feature_dim, self.group_size
        grads = {"w2": h.T @ dlogit, "b2": np.array([dlogit.sum()])}
        dpre = np.outer(dlogit, P["w2"]) * (1.0 - h * h)
        grads["w1"] = dpre.T @ z
        grads["b1"] = dpre.sum(axis=0)
        dz = dpre @ P["w1"]
        dqa = dz[:, 2 * D:2 * D + S].copy()
        dqb = dz[:, 2 * D + S:2 * D + 2 * S].copy()
        dm = dz[:, 2 * D + 2 * S:]
        dgate = np.sum(dm * (qa - qb), axis=1)
        dqa += gate[:, None] * dm
        dqb -= gate[:, None] * dm
        dbil = dgate * gate * (1.0 - gate)
        grads["gate_w"] = np.einsum("b,bs,bt->st", dbil, qa, qb)
        grads["gate_b"] = np.array([dbil.sum()])
        dqa += dbil[:, None] * (qb @ P["gate_w"].T)
        dqb += dbil[:, None] * (qa @ P["gate_w"])
        for key, groups, alpha, dq in (("u_first", ga, aa, dqa), ("u_second", gb, ab, dqb)):
            dalpha = groups @ dq[:, :, None]  # (B, K, 1)
            dalpha = dalpha[..., 0]
            dscore = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
            grads[key] = np.einsum("bk,bks->s", dscore, groups)
        return grads

    def predict_proba(self, f_first, f_second):
        logit, _ = self.forward(f_first, f_second)
        return _sigmoid(logit)

    # persistence ---------------------------------------------------------

    def to_dict(self):
        return {
            "format": "fusion-classifier",
            "version": 1,
            "feature_spec": {
                "n_groups": self.n_groups,
                "group_size": self.group_size,
                "stats": list(FEATURE_STATS[:self.group_size]),
                "layout": "joint-major: [j0.peak, j0.entropy, j0.sharpness, j1.peak, ...]",
                "sharpness_window": 2,
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
            },
            "hidden": self.hidden,
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            spec = doc["feature_spec"]
            params = {k: np.asarray(v["data"], float).reshape(v["shape"])
                      for k, v in doc["weights"].items()}
            return cls(int(spec["n_groups"]), int(spec["group_size"]), int(doc["hidden"]),
                       np.asarray(spec["mean"], float), np.asarray(spec["std"], float), params)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed fusion classifier document ({exc})") from exc


def classify(clf: FusionClassifier, f_first, f_second) -> float:
    f_first = np.asarray(f_first, float)
    f_second = np.asarray(f_second, float)
    if f_first.shape[-1] != clf.feature_dim or f_second.shape[-1] != clf.feature_dim:
        raise ValueError(f"feature dims {f_first.shape[-1]}/{f_second.shape[-1]} != {clf.feature_dim}")
    p = clf.predict_proba(f_first, f_second)
    return float(p[0]) if f_first.ndim == 1 else p


def bce_loss(clf, fa, fb, labels):
    logit, cache = clf.forward(fa, fb)
    y = np.asarray(labels, float)
    # log(1 + e^x) - y x, stable
    loss = np.mean(np.logaddexp(0.0, logit) - y * logit)
    dlogit = (_sigmoid(logit) - y) / len(y)
    return loss, clf.backward(dlogit, cache)


def save_classifier(clf, path):
    Path(path).write_text(json.dumps(clf.to_dict()), encoding="utf-8")


def load_classifier(path):
    path = Path(path)
    try:
        return FusionClassifier.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not a classifier document ({exc})") from exc


@dataclass(frozen=True)
class FusionTrainConfig:
    hidden: int = 16
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 256
    weight_decay: float = 1e-4
    seed: int = 0


def train_classifier(pairs, cfg: FusionTrainConfig = FusionTrainConfig(), n_groups=None):
    """Fit by minibatch Adam on binary cross-entropy.

    ``pairs`` is a sequence of (f_first, f_second, label) or a tuple of three
    arrays.  Returns (classifier, per-epoch loss list).
    """
    if isinstance(pairs, tuple) and len(pairs) == 3 and np.ndim(pairs[0]) == 2:
        fa, fb, y = (np.asarray(a, float) for a in pairs)
    else:
        fa = np.array([p[0] for p in pairs], float)
        fb = np.array([p[1] for p in pairs], float)
        y = np.array([p[2] for p in pairs], float)
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both labels")
    D = fa.shape[1]
    group_size = len(FEATURE_STATS) if n_groups is None else D // n_groups
    n_groups = D // group_size if n_groups is None else n_groups
    both = np.concatenate([fa, fb])
    mean, std = both.mean(axis=0), both.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    clf = FusionClassifier.init(n_groups, group_size, cfg.hidden, cfg.seed, mean, std)

    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in clf.params.items()}
    v = {k: np.zeros_like(v) for k, v in clf.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses = []
    n = len(y)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = bce_loss(clf, fa[idx], fb[idx], y[idx])
            total += loss * len(idx)
            step += 1
            for k, g in grads.items():
                g = g + cfg.weight_decay * clf.params[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                clf.params[k] = clf.params[k] - cfg.lr * mh / (np.sqrt(vh) + eps)
        losses.append(total / n)
    return clf, losses


# --------------------------------------------------------------------------
# branch simulation


@dataclass(frozen=True)
class BranchProfile:
    """How a simulated detector branch degrades its heatmaps."""

    jitter_px: float = 1.0
    amplitude: tuple = (0.85, 1.0)
    sigma_scale: float = 1.0
    noise: float = 0.02


CLEAN = BranchProfile()
CORRUPTED = BranchProfile(jitter_px=8.0, amplitude=(0.3, 0.7), sigma_scale=1.6, noise=0.02)


def simulate_branch(coords, visible, profile: BranchProfile, rng, resolution, stride, sigma,
                    origin=(0.0, 0.0)):
    """Heatmaps a detector with the given profile would output for the true
    keypoints ``coords`` (N_J, 2)."""
    coords = np.asarray(coords, float)
    noisy = coords + profile.jitter_px * rng.standard_normal(coords.shape)
    grids = render_grids(noisy, visible, resolution, stride, sigma * profile.sigma_scale, origin)
    amp = rng.uniform(*profile.amplitude, size=coords.shape[0])
    grids = grids * amp[:, None, None]
    if profile.noise > 0:
        grids = grids + profile.noise * rng.random(grids.shape)
    return np.clip(grids, 0.0, 1.0)


def branch_error(grids, gt_coords, visible, stride, origin, temperature=0.1):
    """Per-frame 2D MPJPE of a branch after soft-argmax decoding."""
    pred, _ = soft_argmax_coords(grids, stride, origin, temperature)
    err = np.linalg.norm(pred - gt_coords, axis=-1)
    return float(err[visible].mean()), pred


@dataclass(frozen=True)
class FusionSimConfig:
    """Two simulated branches; the first is corrupted on a random half of
    the frames and the second on the complementary half."""

    frames: int = 4000
    train_fraction: float = 0.75
    seed: int = 0
    clean: BranchProfile = CLEAN
    corrupted: BranchProfile = CORRUPTED
    resolution: tuple = (64, 64)
    stride: float = 10.0
    sigma: float = 20.0
    origin: tuple = (0.0, -80.0)
    temperature: float = 0.1
    train: FusionTrainConfig = FusionTrainConfig()

    def __post_init__(self):
        if self.frames < 4 or not 0 < self.train_fraction < 1:
            raise ValueError("need >= 4 frames and 0 < train_fraction < 1")


def _frame_branches(cfg: FusionSimConfig, i, coords, visible, first_corrupted):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, i]))
    pa = cfg.corrupted if first_corrupted else cfg.clean
    pb = cfg.clean if first_corrupted else cfg.corrupted
    args = (cfg.resolution, cfg.stride, cfg.sigma, cfg.origin)
    ha = simulate_branch(coords, visible, pa, rng, *args)
    hb = simulate_branch(coords, visible, pb, rng, *args)
    return ha, hb


def run_simulation(gt_coords, gt_visible, cfg: FusionSimConfig = FusionSimConfig(), log=None):
    """Simulate both branches on every frame, train the classifier on the
    first ``train_fraction`` of frames and evaluate on the rest.

    gt_coords: (F, N_J, 2) px; gt_visible: (F, N_J).  Returns (report dict,
    classifier).  Heatmaps are regenerated from per-frame seeds for the
    evaluation pass rather than kept in memory.
    """
    gt_coords = np.asarray(gt_coords, float)
    gt_visible = np.asarray(gt_visible, bool)
    F = len(gt_coords)
    mask_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    first_bad = np.zeros(F, bool)
    first_bad[mask_rng.permutation(F)[:F // 2]] = True

    feats_a, feats_b, err_a, err_b = [], [], [], []
    for i in range(F):
        ha, hb = _frame_branches(cfg, i, gt_coords[i], gt_visible[i], first_bad[i])
        feats_a.append(branch_features(ha))
        feats_b.append(branch_features(hb))
        err_a.append(branch_error(ha, gt_coords[i], gt_visible[i], cfg.stride, cfg.origin, cfg.temperature)[0])
        err_b.append(branch_error(hb, gt_coords[i], gt_visible[i], cfg.stride, cfg.origin, cfg.temperature)[0])
    fa, fb = np.array(feats_a), np.array(feats_b)
    err_a, err_b = np.array(err_a), np.array(err_b)
    labels = np.array([fusion_label(a, b) for a, b in zip(err_a, err_b)])

    n_train = int(round(cfg.train_fraction * F))
    tr, te = slice(0, n_train), slice(n_train, F)
    clf, losses = train_classifier((fa[tr], fb[tr], labels[tr]), cfg.train)
    scores = clf.predict_proba(fa[te], fb[te])
    acc = float(np.mean((scores >= 0.5).astype(int) == labels[te]))

    fused_err = []
    for k, i in enumerate(range(n_train, F)):
        ha, hb = _frame_branches(cfg, i, gt_coords[i], gt_visible[i], first_bad[i])
        g = fuse(float(scores[k]), HeatmapStack(ha, cfg.stride, cfg.origin),
                 HeatmapStack(hb, cfg.stride, cfg.origin))
        fused_err.append(branch_error(g.grids, gt_coords[i], gt_visible[i], cfg.stride, cfg.origin,
                                      cfg.temperature)[0])
    report = {
        "frames": F,
        "train_frames": n_train,
        "heldout_frames": F - n_train,
        "classifier_accuracy": acc,
        "mpjpe_first_px": float(err_a[te].mean()),
        "mpjpe_second_px": float(err_b[te].mean()),
        "mpjpe_fused_px": float(np.mean(fused_err)),
        "mpjpe_oracle_px": float(np.minimum(err_a[te], err_b[te]).mean()),
        "label_balance": float(labels[tr].mean()),
        "train_loss_first": float(losses[0]),
        "train_loss_last": float(losses[-1]),
    }
    if log:
        log(report)
    return report, clf
