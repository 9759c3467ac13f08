"""Dense heatmap -> (theta, beta) regressor with a hand-written backprop engine.

The network is a plain stack of affine layers.  Training runs in float32;
``astype(np.float64)`` gives a copy for finite-difference checks.  The loss
combines parameter MSE with a posed-joint MSE whose gradient is propagated
through forward kinematics in reverse mode.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body_model import BodyModel, PosedBody, forward_kinematics, pose
from .errors import ConfigError, DataFormatError, NumericAbortError
from .heatmap import HeatmapStack, avg_pool, render_grids, soft_argmax_coords
from .rotations import axis_angle_jacobian

N_THETA = 72
N_BETA = 10
N_OUT = N_THETA + N_BETA


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def _softplus_grad(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


ACTIVATIONS = {
    "softplus": (_softplus, _softplus_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass(eq=False)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def shape(self):
        return self.weight.shape


@dataclass(eq=False)
class RegressorNet:
    layers: list
    input_spec: dict
    input_mean: np.ndarray
    input_std: np.ndarray

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self):
        """(name, array) pairs in a fixed order."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}.weight", layer.weight))
            out.append((f"layer{i}.bias", layer.bias))
        return out

    def astype(self, dtype):
        layers = [Dense(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        return RegressorNet(layers, dict(self.input_spec), self.input_mean.astype(dtype),
                            self.input_std.astype(dtype))

    def copy(self):
        return self.astype(self.dtype)


def input_spec_pooled(n_keypoints, resolution=(64, 64), pool=(16, 16), stride=None, origin=None):
    return {"kind": "pooled", "n_keypoints": int(n_keypoints), "resolution": list(resolution),
            "pool": list(pool), "stride": stride, "origin": None if origin is None else list(origin)}


def input_spec_coords(n_keypoints, resolution=(64, 64), stride=10.0, origin=(0.0, -80.0),
                      temperature=0.1):
    return {"kind": "coords", "n_keypoints": int(n_keypoints), "resolution": list(resolution),
            "stride": float(stride), "origin": list(origin), "temperature": temperature}


def input_dim(spec):
    if spec["kind"] == "pooled":
        return spec["n_keypoints"] * spec["pool"][0] * spec["pool"][1]
    if spec["kind"] == "coords":
        return spec["n_keypoints"] * 3
    raise ConfigError(f"unknown input kind {spec['kind']!r}")


def encode_inputs(grids, spec, dtype=np.float32):
    """(B, N_J, H, W) heatmaps -> (B, D) network inputs per ``spec``."""
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    nj, (H, W) = spec["n_keypoints"], spec["resolution"]
    if grids.shape[1:] != (nj, H, W):
        raise ValueError(f"heatmaps {grids.shape[1:]} do not match input spec {(nj, H, W)}")
    if spec["kind"] == "pooled":
        return avg_pool(grids.astype(dtype), tuple(spec["pool"])).reshape(len(grids), -1)
    coords, peak = soft_argmax_coords(grids, spec["stride"], spec["origin"], spec["temperature"])
    ext = np.array([spec["stride"] * W, spec["stride"] * H])
    centre = np.asarray(spec["origin"]) + 0.5 * ext
    xy = (coords - centre) / ext
    return np.concatenate([xy, peak[..., None]], axis=-1).reshape(len(grids), -1).astype(dtype)


def record_transform(spec):
    """Per-record transform for synthgen.load_dataset (keeps memory small)."""
    if spec["kind"] == "pooled":
        pool = tuple(spec["pool"])
        return lambda h: avg_pool(h, pool).reshape(-1)
    return lambda h: encode_inputs(h[None], spec)[0]


def spec_for(cfg: TrainConfig, n_keypoints, resolution, stride, origin):
    if cfg.input_kind == "pooled":
        return input_spec_pooled(n_keypoints, resolution, cfg.pool, stride, origin)
    return input_spec_coords(n_keypoints, resolution, stride, origin)


def jitter_augment(spec, keypoints, sigma, jitter_px):
    """Augmentation callback: re-render the stored keypoints (N, N_J, 3) with
    Gaussian peak jitter and encode them."""
    res = tuple(spec["resolution"])

    def fn(idx, rng):
        kp = keypoints[idx]
        xy = kp[..., :2] + jitter_px * rng.standard_normal(kp[..., :2].shape)
        grids = render_grids(xy, kp[..., 2] > 0.5, res, spec["stride"], sigma, spec["origin"])
        return encode_inputs(grids, spec)
    return fn


def init_net(spec, hidden=(512, 256), seed=0, activation="softplus", dtype=np.float32,
             zero_last=False, head_scale=0.1) -> RegressorNet:
    """Glorot-uniform weights (output layer scaled by ``head_scale``), zero biases."""
    rng = np.random.default_rng(seed)
    dims = [input_dim(spec), *hidden, N_OUT]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        lim = math.sqrt(6.0 / (a + b))
        w = rng.uniform(-lim, lim, size=(b, a))
        last = i == len(dims) - 2
        if last:
            w *= 0.0 if zero_last else head_scale
        layers.append(Dense(w.astype(dtype), np.zeros(b, dtype), "linear" if last else activation))
    d = dims[0]
    return RegressorNet(layers, dict(spec), np.zeros(d, dtype), np.ones(d, dtype))


def check_chain(net: RegressorNet):
    prev = net.input_dim
    for i, l in enumerate(net.layers):
        if l.weight.shape[1] != prev or l.bias.shape != (l.weight.shape[0],):
            raise DataFormatError(f"layer {i}: dims do not chain ({l.weight.shape}, prev {prev})")
        if l.activation not in ACTIVATIONS:
            raise DataFormatError(f"layer {i}: unknown activation {l.activation!r}")
        prev = l.weight.shape[0]
    if prev != N_OUT:
        raise DataFormatError(f"network output is {prev}, expected {N_OUT}")


# --------------------------------------------------------------------------
# forward / backward


def forward_raw(net: RegressorNet, x, keep=False):
    """x: (B, D) -> (B, 82).  With ``keep`` also returns the per-layer cache."""
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match network input dim {net.input_dim}")
    h = (x - net.input_mean) / net.input_std
    cache = []
    for l in net.layers:
        z = h @ l.weight.T + l.bias
        act = ACTIVATIONS[l.activation][0]
        cache.append((h, z))
        h = act(z)
    return (h, cache) if keep else h


def forward(net: RegressorNet, heatmaps):
    """Heatmaps (HeatmapStack, (N_J, H, W) or (B, N_J, H, W)) -> (theta, beta)."""
    grids = heatmaps.grids if isinstance(heatmaps, HeatmapStack) else np.asarray(heatmaps)
    single = grids.ndim == 3
    out = forward_raw(net, encode_inputs(grids, net.input_spec, net.dtype))
    theta, beta = out[:, :N_THETA], out[:, N_THETA:]
    return (theta[0], beta[0]) if single else (theta, beta)


def backward(net: RegressorNet, cache, grad_out):
    """Parameter gradients given dL/d(output); returns list parallel to params()."""
    per_layer = []
    g = grad_out
    for l, (h, z) in zip(reversed(net.layers), reversed(cache)):
        g = g * ACTIVATIONS[l.activation][1](z)
        per_layer.append((g.T @ h, g.sum(axis=0)))
        g = g @ l.weight
    out = []
    for gw, gb in reversed(per_layer):
        out.extend([gw, gb])
    return out


# --------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    w_param: float = 1.0
    w_joint: float = 100.0

    def __post_init__(self):
        if self.w_param < 0 or self.w_joint < 0 or (self.w_param == 0 and self.w_joint == 0):
            raise ConfigError("loss weights must be >= 0 and not both zero")


class JointFK:
    """Cached shape->joint maps for batched FK and its reverse-mode gradient."""

    def __init__(self, model: BodyModel):
        self.parents = np.asarray(model.kinematic_parents)
        self.rest0 = model.joint_regressor @ model.template_vertices  # (J, 3)
        self.rest_dirs = np.einsum("jv,vcb->jcb", model.joint_regressor, model.shape_dirs)  # (J,3,10)

    def joints(self, theta, beta):
        theta = np.asarray(theta, float).reshape(len(theta), -1, 3)
        rest = self.rest0 + np.einsum("jcb,nb->njc", self.rest_dirs, beta)
        R, dR = axis_angle_jacobian(theta)
        rg, pos, _ = forward_kinematics(R, rest, self.parents)
        return pos, (R, dR, rg, rest)

    def vjp(self, gpos, cache):
        """dL/dtheta (B, 72), dL/dbeta (B, 10) from dL/djoints (B, J, 3)."""
        R, dR, rg, rest = cache
        gpos = gpos.copy()
        g_rg = np.zeros_like(rg)
        g_rest = np.zeros_like(rest)
        g_R = np.zeros_like(R)
        par = self.parents
        for k in range(len(par) - 1, 0, -1):
            p = par[k]
            gk = gpos[:, k]
            bone = rest[:, k] - rest[:, p]
            gpos[:, p] += gk
            g_rg[:, p] += gk[:, :, None] * bone[:, None, :]
            local = np.einsum("nba,nb->na", rg[:, p], gk)  # rg_p^T g
            g_rest[:, k] += local
            g_rest[:, p] -= local
            # rg_k = rg_p R_k
            g_rg[:, p] += g_rg[:, k] @ np.swapaxes(R[:, k], -1, -2)
            g_R[:, k] = np.swapaxes(rg[:, p], -1, -2) @ g_rg[:, k]
        g_rest[:, 0] += gpos[:, 0]
        g_R[:, 0] = g_rg[:, 0]
        # dR has shape (B, J, 3(i), 3, 3)
        g_theta = np.einsum("njab,njiab->nji", g_R, dR).reshape(len(R), -1)
        g_beta = np.einsum("njc,jcb->nb", g_rest, self.rest_dirs)
        return g_theta, g_beta


def loss_and_grad(theta_hat, beta_hat, theta, beta, fk: JointFK, weights: LossWeights):
    """Batch-mean loss and its gradient with respect to the predictions.

    Per sample: w_param (|dtheta|^2 + |dbeta|^2) + w_joint mean_j |dp_j|^2
    over all skeleton joints (meters).
    """
    theta_hat = np.atleast_2d(np.asarray(theta_hat, float))
    beta_hat = np.atleast_2d(np.asarray(beta_hat, float))
    theta = np.atleast_2d(np.asarray(theta, float))
    beta = np.atleast_2d(np.asarray(beta, float))
    if theta_hat.shape != theta.shape or beta_hat.shape != beta.shape:
        raise ValueError(f"prediction/target shape mismatch {theta_hat.shape}/{theta.shape}, "
                         f"{beta_hat.shape}/{beta.shape}")
    if theta.shape[1] != N_THETA or beta.shape[1] != N_BETA:
        raise ValueError("expected 72 pose and 10 shape values")
    B = len(theta)
    dth, dbe = theta_hat - theta, beta_hat - beta
    loss = weights.w_param * (np.sum(dth ** 2) + np.sum(dbe ** 2)) / B
    g_theta = 2.0 * weights.w_param * dth / B
    g_beta = 2.0 * weights.w_param * dbe / B
    if weights.w_joint > 0:
        p_hat, cache = fk.joints(theta_hat, beta_hat)
        p_true, _ = fk.joints(theta, beta)
        d = p_hat - p_true
        J = d.shape[1]
        loss += weights.w_joint * np.sum(d ** 2) / (B * J)
        gt, gb = fk.vjp(2.0 * weights.w_joint * d / (B * J), cache)
        g_theta += gt
        g_beta += gb
    return float(loss), g_theta, g_beta


def net_loss_and_grads(net, x, theta, beta, fk, weights):
    out, cache = forward_raw(net, x, keep=True)
    loss, gt, gb = loss_and_grad(out[:, :N_THETA], out[:, N_THETA:], theta, beta, fk, weights)
    gout = np.concatenate([gt, gb], axis=1).astype(net.dtype)
    return loss, backward(net, cache, gout)


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    tolerance: float
    n_checked: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


GRAD_FLOOR = 1e-4


def rel_error(a, n, floor=GRAD_FLOOR):
    """|a - n| / max(|a|, |n|, floor).  Entries with gradients below
    ``floor`` are compared on an absolute scale: at step 1e-5 the central
    difference of an O(10-100) loss carries ~1e-9 of rounding noise."""
    return float(np.abs(a - n) / max(abs(a), abs(n), floor))


def grad_check(net: RegressorNet, sample, model_or_fk, tolerance=1e-4, weights=LossWeights(),
               step=1e-5, entries_per_param=12, seed=0) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences on a
    float64 copy of ``net``; ``entries_per_param`` random entries of every
    weight and bias array are probed (all entries if the array is smaller).

    sample: (x (B, D), theta (B, 72), beta (B, 10)).
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    fk = model_or_fk if isinstance(model_or_fk, JointFK) else JointFK(model_or_fk)
    net64 = net.astype(np.float64)
    x, theta, beta = (np.atleast_2d(np.asarray(a, np.float64)) for a in sample)
    _, grads = net_loss_and_grads(net64, x, theta, beta, fk, weights)
    rng = np.random.default_rng(seed)
    per_param, worst, count = {}, 0.0, 0
    for (name, arr), g in zip(net64.params(), grads):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        k = min(entries_per_param, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            lp = net_loss_and_grads(net64, x, theta, beta, fk, weights)[0]
            flat[i] = old - step
            lm = net_loss_and_grads(net64, x, theta, beta, fk, weights)[0]
            flat[i] = old
            errs.append(rel_error(gflat[i], (lp - lm) / (2 * step)))
        per_param[name] = max(errs)
        worst = max(worst, per_param[name])
        count += k
    return GradCheckReport(worst, per_param, tolerance, count)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    w_param: float = 1.0
    w_joint: float = 100.0
    optimizer: str = "adam"  # sgd | momentum | adam
    momentum: float = 0.9
    lr_schedule: str = "cosine"  # cosine | constant
    hidden: tuple = (512, 256)
    input_kind: str = "pooled"
    pool: tuple = (16, 16)
    augment: bool = False  # off: train on the ideal renders stored in the shards
    jitter_px: float = 1.0  # peak-jitter std (px) used when augment is on

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr must be >= 0, batch_size and epochs >= 1")
        if self.jitter_px < 0:
            raise ConfigError("jitter_px must be >= 0")
        if self.input_kind not in ("pooled", "coords"):
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        LossWeights(self.w_param, self.w_joint)

    @property
    def weights(self):
        return LossWeights(self.w_param, self.w_joint)


@dataclass
class TrainResult:
    net: RegressorNet
    losses: list  # mean training loss per epoch
    rows: list = field(default_factory=list)
    seconds: float = 0.0


class _Optimizer:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params] if cfg.optimizer == "adam" else None

    def step(self, params, grads, lr):
        self.t += 1
        c = self.cfg
        for i, (p, g) in enumerate(zip(params, grads)):
            if c.optimizer == "sgd":
                p -= lr * g
            elif c.optimizer == "momentum":
                self.m[i] = c.momentum * self.m[i] + g
                p -= lr * self.m[i]
            else:
                b1, b2 = 0.9, 0.999
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
                mh = self.m[i] / (1 - b1 ** self.t)
                vh = self.v[i] / (1 - b2 ** self.t)
                p -= (lr * mh / (np.sqrt(vh) + 1e-8)).astype(p.dtype)


def fit_input_normalization(net: RegressorNet, x):
    mean = x.mean(axis=0, dtype=np.float64)
    std = x.std(axis=0, dtype=np.float64)
    net.input_mean = mean.astype(net.dtype)
    net.input_std = np.where(std > 1e-6, std, 1.0).astype(net.dtype)


def train(net: RegressorNet, x, theta, beta, model_or_fk, cfg: TrainConfig,
          eval_fn=None, log=None, augment=None) -> TrainResult:
    """Mini-batch training in place on ``net``.

    x: (N, D) encoded inputs; theta (N, 72); beta (N, 10).  ``eval_fn(net,
    epoch)`` may return a dict of metrics appended to the curve.
    ``augment(indices, rng)`` may replace a batch's inputs (e.g. re-rendered
    jittered heatmaps).  Batch order and augmentation draws are fixed by
    ``cfg.seed``.
    """
    n = len(x)
    if n == 0:
        raise DataFormatError("training set is empty")
    fk = model_or_fk if isinstance(model_or_fk, JointFK) else JointFK(model_or_fk)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = [p for _, p in net.params()]
    opt = _Optimizer(params, cfg)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    losses, rows = [], []
    t0 = time.perf_counter()
    step = 0
    x = np.asarray(x, dtype=net.dtype)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for s in range(steps_per_epoch):
            idx = np.sort(order[s * cfg.batch_size:(s + 1) * cfg.batch_size])
            xb = x[idx] if augment is None else np.asarray(augment(idx, aug_rng), dtype=net.dtype)
            loss, grads = net_loss_and_grads(net, xb, theta[idx], beta[idx], fk, cfg.weights)
            if not math.isfinite(loss):
                raise NumericAbortError(
                    f"non-finite loss at epoch {epoch + 1}, step {s + 1} (lr={cfg.lr}); "
                    f"last finite epoch loss {losses[-1] if losses else 'n/a'}")
            if cfg.lr_schedule == "cosine":
                lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / total_steps)))
            else:
                lr = cfg.lr
            if lr > 0:
                opt.step(params, grads, lr)
            acc += loss * len(idx)
            step += 1
        losses.append(acc / n)
        row = {"epoch": epoch + 1, "loss": losses[-1]}
        if eval_fn is not None:
            row.update(eval_fn(net, epoch + 1))
        rows.append(row)
        if log:
            log(row)
    return TrainResult(net, losses, rows, time.perf_counter() - t0)


def write_loss_curve(path, rows):
    keys = list(rows[0].keys()) if rows else ["epoch", "loss"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


# --------------------------------------------------------------------------
# inference


def predict(net: RegressorNet, x, batch=1024):
    out = np.concatenate([forward_raw(net, x[i:i + batch]) for i in range(0, len(x), batch)])
    return out[:, :N_THETA].astype(np.float64), out[:, N_THETA:].astype(np.float64)


def infer_mesh(net: RegressorNet, heatmaps, model: BodyModel) -> PosedBody:
    theta, beta = forward(net, heatmaps)
    return pose(model, np.asarray(theta, float), np.asarray(beta, float))


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "patientmesh-regressor"


def save_checkpoint(net: RegressorNet, path, config_hash="", extra=None):
    """First line: JSON header; then the little-endian weight blob."""
    arrays = [("input_mean", net.input_mean), ("input_std", net.input_std)] + net.params()
    entries, blobs, offset = [], [], 0
    for name, a in arrays:
        b = np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str.replace(">", "<").replace("=", "<"),
                        "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "architecture": [{"in": l.weight.shape[1], "out": l.weight.shape[0],
                          "activation": l.activation} for l in net.layers],
        "input_spec": net.input_spec,
        "config_hash": config_hash,
        "arrays": entries,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (net, header)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"format {header.get('format')!r}")
        blob = raw[nl + 1:]
        arrays = {}
        for e in header["arrays"]:
            if e["offset"] + e["nbytes"] > len(blob):
                raise ValueError(f"array {e['name']} truncated")
            arrays[e["name"]] = np.frombuffer(blob, np.dtype(e["dtype"]), int(np.prod(e["shape"])),
                                              e["offset"]).reshape(e["shape"]).copy()
        layers = [Dense(arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"], a["activation"])
                  for i, a in enumerate(header["architecture"])]
        net = RegressorNet(layers, header["input_spec"], arrays["input_mean"], arrays["input_std"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    check_chain(net)
    return net, header


def train_config_dict(cfg: TrainConfig):
    return asdict(cfg)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mpjpe_3d: float  # mm, root-aligned
    pa_mpjpe: float  # mm
    pve_t_sc: float  # mm
    mpjpe_2d: float  # px
    pck: float  # fraction at ``pck_alpha`` x torso diameter
    count: int
    pck_alpha: float = 0.2

    def rows(self, dataset=""):
        units = {"mpjpe_3d": "mm", "pa_mpjpe": "mm", "pve_t_sc": "mm", "mpjpe_2d": "px", "pck": "fraction"}
        return [{"dataset": dataset, "metric": k, "value": getattr(self, k), "units": u, "count": self.count}
                for k, u in units.items()]


def evaluate(model: BodyModel, theta_hat, beta_hat, theta, beta, extrinsics, intr, pck_alpha=0.2,
             root=0) -> EvalReport:
    """All metrics over the model's keypoints.

    The regressor predicts no translation, so 3D and 2D errors are taken
    after moving the predicted root joint onto the true one; the 2D error
    projects both keypoint sets with the true camera.
    """
    from .body_model import pose_joints_batch
    from .camera import CameraExtrinsics, project
    from .metrics import mpjpe_3d, pa_mpjpe, pck, pve_t_sc, torso_diameter

    j_hat, k_hat = pose_joints_batch(model, theta_hat, beta_hat)
    j_true, k_true = pose_joints_batch(model, theta, beta)
    k_hat = k_hat - j_hat[:, root:root + 1] + j_true[:, root:root + 1]
    uv_hat, uv_true, vis = [], [], []
    for i, e in enumerate(np.asarray(extrinsics)):
        R = np.asarray(e[:9], float).reshape(3, 3)
        U, _, Vt = np.linalg.svd(R)
        extr = CameraExtrinsics(U @ Vt, e[9:12])
        a, va = project(k_hat[i], intr, extr)
        b, vb = project(k_true[i], intr, extr)
        uv_hat.append(np.where(np.isfinite(a), a, 0.0))
        uv_true.append(b)
        vis.append(va & vb)
    uv_hat, uv_true, vis = np.array(uv_hat), np.array(uv_true), np.array(vis)
    err2d = np.linalg.norm(uv_hat - uv_true, axis=-1)
    torso = torso_diameter(uv_true, model.keypoint_names)
    pck_val = pck(uv_hat, uv_true, pck_alpha, np.maximum(torso, 1e-9)).mean
    return EvalReport(
        mpjpe_3d=mpjpe_3d(k_hat, k_true).mean,
        pa_mpjpe=pa_mpjpe(k_hat, k_true).mean,
        pve_t_sc=pve_t_sc(beta_hat, beta, model).mean,
        mpjpe_2d=float(err2d[vis].mean()) if vis.any() else float("nan"),
        pck=float(pck_val),
        count=len(theta),
        pck_alpha=pck_alpha,
    )
