"""Small fully connected steering regressor with hand-written backpropagation.

Each hidden block is ``dense -> [batch norm] -> relu -> [dropout]`` and the
head is a single linear unit.  Inputs are standardized with statistics taken
from the training set and stored in the policy, so a saved policy is
self-contained.  Optimization is Adam with decoupled weight decay applied to
the dense weights only.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
EMBEDDING_LOCATIONS = ("post_linear", "post_norm", "post_activation")
POLICY_FORMAT = "policyfmt v1"


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or weights)."""


class PolicyFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    input_dim: int
    stack_size: int = 1
    hidden: tuple[int, ...] = (64, 32)
    use_norm: bool = False
    dropout_p: float = 0.2
    bn_momentum: float = 0.99

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("input_dim and hidden sizes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.stack_size not in (1, 3):
            raise ValueError("stack_size must be 1 or 3")

    @classmethod
    def single_frame(cls, ray_count: int = 32, **kw) -> "PolicySpec":
        return cls(input_dim=ray_count, stack_size=1, **kw)

    @classmethod
    def multi_frame(cls, ray_count: int = 32, **kw) -> "PolicySpec":
        kw.setdefault("hidden", (128, 64))
        kw.setdefault("use_norm", True)
        return cls(input_dim=3 * ray_count, stack_size=3, **kw)

    @property
    def embedding_dim(self) -> int:
        return self.hidden[-1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("invalid training configuration")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


class Policy:
    """Trained steering regressor: ``predict`` maps flat observations to [-1, 1]."""

    def __init__(self, spec: PolicySpec, layers: list[Layer], head: Layer,
                 input_mean: np.ndarray, input_std: np.ndarray, meta: dict | None = None):
        self.spec = spec
        self.layers = layers
        self.head = head
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        self.meta = dict(meta or {})

    @property
    def stack_size(self) -> int:
        return self.spec.stack_size

    @classmethod
    def init(cls, spec: PolicySpec, seed: int = 0, input_mean=None, input_std=None,
             zero_head: bool = False) -> "Policy":
        rng = np.random.default_rng(seed)
        layers = []
        fan_in = spec.input_dim
        for width in spec.hidden:
            bound = math.sqrt(6.0 / fan_in)
            layer = Layer(rng.uniform(-bound, bound, size=(fan_in, width)), np.zeros(width))
            if spec.use_norm:
                layer.gamma, layer.beta = np.ones(width), np.zeros(width)
                layer.running_mean, layer.running_var = np.zeros(width), np.ones(width)
            layers.append(layer)
            fan_in = width
        bound = math.sqrt(3.0 / fan_in)
        head = Layer(rng.uniform(-bound, bound, size=(fan_in, 1)), np.zeros(1))
        if zero_head:
            head.W[:] = 0.0
        mean = np.zeros(spec.input_dim) if input_mean is None else input_mean
        std = np.ones(spec.input_dim) if input_std is None else input_std
        return cls(spec, layers, head, mean, std)

    # -- inference ---------------------------------------------------------

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.spec.input_dim)
        return (x - self.input_mean) / self.input_std

    def forward(self, x: np.ndarray, mode: str = "infer",
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
        """Predictions and the last hidden block's activations at every defined tap.

        ``infer`` disables dropout and normalizes with running statistics;
        ``train`` uses batch statistics and draws dropout masks from ``rng``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.size % self.spec.input_dim or (x.ndim == 2 and x.shape[1] != self.spec.input_dim):
            raise ValueError(f"expected {self.spec.input_dim} inputs per sample")
        h = self._standardize(x)
        if mode == "train":
            out, cache, _ = _forward_train(self, h, rng or np.random.default_rng())
            last = cache[-1]
            taps = {"post_linear": last["z"], "post_activation": last["a"]}
            if self.spec.use_norm:
                taps["post_norm"] = last["n"]
            return out, taps
        if mode != "infer":
            raise ValueError(f"unknown mode {mode!r}")
        taps = {}
        for i, layer in enumerate(self.layers):
            z = h @ layer.W + layer.b
            n = z
            if self.spec.use_norm:
                n = layer.gamma * (z - layer.running_mean) / np.sqrt(layer.running_var + BN_EPS) \
                    + layer.beta
            h = np.maximum(n, 0.0)
            if i == len(self.layers) - 1:
                taps = {"post_linear": z, "post_activation": h}
                if self.spec.use_norm:
                    taps["post_norm"] = n
        return (h @ self.head.W + self.head.b)[:, 0], taps

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.forward(x)[0], -1.0, 1.0)

    def act(self, observation, pose=None) -> float:
        return float(self.predict(observation.flat())[0])

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
            if self.spec.use_norm:
                out += [layer.gamma, layer.beta]
        out += [self.head.W, self.head.b]
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in self.params() + [self.input_mean, self.input_std]:
            h.update(np.ascontiguousarray(arr).tobytes())
        for layer in self.layers:
            if self.spec.use_norm:
                h.update(layer.running_mean.tobytes())
                h.update(layer.running_var.tobytes())
        return h.hexdigest()[:16]


# --- training-mode pass ---------------------------------------------------

def _forward_train(policy: Policy, x: np.ndarray, rng: np.random.Generator | None,
                   masks: list[np.ndarray] | None = None):
    """Training-mode forward pass returning predictions and a cache for backprop.

    Dropout masks are drawn from ``rng`` unless given explicitly (used by the
    gradient check).  Masks are pre-scaled by ``1 / (1 - p)``.
    """
    spec = policy.spec
    h = x
    cache = []
    for i, layer in enumerate(policy.layers):
        z = h @ layer.W + layer.b
        entry = {"h_in": h, "z": z}
        if spec.use_norm:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv
            n = layer.gamma * xhat + layer.beta
            entry.update(xhat=xhat, inv=inv, mu=mu, var=var)
        else:
            n = z
        a = np.maximum(n, 0.0)
        entry["relu"] = n > 0
        entry["n"] = n
        entry["a"] = a
        if spec.dropout_p > 0:
            if masks is not None:
                m = masks[i]
            else:
                m = (rng.random(a.shape) >= spec.dropout_p) / (1.0 - spec.dropout_p)
            a = a * m
            entry["mask"] = m
        cache.append(entry)
        h = a
    out = (h @ policy.head.W + policy.head.b)[:, 0]
    return out, cache, h


def _backward(policy: Policy, cache, h_last: np.ndarray, dout: np.ndarray) -> list[np.ndarray]:
    """Gradients in the order of :meth:`Policy.params`."""
    spec = policy.spec
    d = dout[:, None]
    g_head_W = h_last.T @ d
    g_head_b = d.sum(axis=0)
    dh = d @ policy.head.W.T
    grads: list[list[np.ndarray]] = []
    for layer, entry in zip(reversed(policy.layers), reversed(cache)):
        if "mask" in entry:
            dh = dh * entry["mask"]
        dn = dh * entry["relu"]
        if spec.use_norm:
            xhat, inv = entry["xhat"], entry["inv"]
            g_gamma = (dn * xhat).sum(axis=0)
            g_beta = dn.sum(axis=0)
            dxhat = dn * layer.gamma
            m = dn.shape[0]
            dz = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dn
        g_W = entry["h_in"].T @ dz
        g_b = dz.sum(axis=0)
        dh = dz @ layer.W.T
        block = [g_W, g_b] + ([g_gamma, g_beta] if spec.use_norm else [])
        grads.append(block)
    flat = [g for block in reversed(grads) for g in block]
    return flat + [g_head_W, g_head_b]


def loss_and_grads(policy: Policy, x: np.ndarray, y: np.ndarray,
                   rng: np.random.Generator | None = None,
                   masks: list[np.ndarray] | None = None):
    """Mean squared error on standardized inputs ``x`` and its parameter gradients."""
    pred, cache, h_last = _forward_train(policy, x, rng, masks)
    err = pred - y
    loss = float(np.mean(err * err))
    grads = _backward(policy, cache, h_last, 2.0 * err / len(y))
    return loss, grads, cache


def _update_running(policy: Policy, cache) -> None:
    mom = policy.spec.bn_momentum
    for layer, entry in zip(policy.layers, cache):
        layer.running_mean = mom * layer.running_mean + (1 - mom) * entry["mu"]
        layer.running_var = mom * layer.running_var + (1 - mom) * entry["var"]


def _decayed(policy: Policy) -> list[bool]:
    flags = []
    for _ in policy.layers:
        flags += [True, False] + ([False, False] if policy.spec.use_norm else [])
    return flags + [True, False]


def _mse(policy: Policy, x: np.ndarray, y: np.ndarray) -> float:
    err = policy.forward(x)[0] - y
    return float(np.mean(err * err))


def train(spec: PolicySpec, x_train: np.ndarray, y_train: np.ndarray,
          x_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
          config: TrainConfig = TrainConfig(), epochs: int | None = None) -> tuple[Policy, TrainHistory]:
    """Fit a policy by minibatch Adam on mean squared error.

    With a validation set training stops after ``patience`` epochs without
    improvement and the best-validation weights are restored.  Without one it
    runs exactly ``epochs`` epochs (default ``max_epochs``).
    """
    x_train = np.asarray(x_train, dtype=np.float64).reshape(len(y_train), -1)
    y_train = np.asarray(y_train, dtype=np.float64)
    if x_train.shape[1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} inputs, got {x_train.shape[1]}")
    if len(y_train) < 2:
        raise ValueError("need at least two training samples")
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    policy = Policy.init(spec, config.seed, mean, std)
    xs = (x_train - mean) / std
    rng = np.random.default_rng([config.seed, 1])
    params = policy.params()
    decay = _decayed(policy)
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step_count = 0
    hist = TrainHistory()
    best_val, best_state, bad = math.inf, None, 0
    n = len(y_train)
    bs = min(config.batch_size, n)
    n_epochs = config.max_epochs if epochs is None else int(epochs)

    for epoch in range(n_epochs):
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2 and spec.use_norm:
                continue  # batch statistics are undefined for a single sample
            loss, grads, cache = loss_and_grads(policy, xs[idx], y_train[idx], rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            weights.append(len(idx))
            if spec.use_norm:
                _update_running(policy, cache)
            step_count += 1
            c1 = 1 - config.beta1 ** step_count
            c2 = 1 - config.beta2 ** step_count
            for p, g, a, b, dec in zip(params, grads, m1, m2, decay):
                a *= config.beta1
                a += (1 - config.beta1) * g
                b *= config.beta2
                b += (1 - config.beta2) * g * g
                if dec and config.weight_decay:
                    p -= config.lr * config.weight_decay * p
                p -= config.lr * (a / c1) / (np.sqrt(b / c2) + config.adam_eps)
        hist.train_loss.append(float(np.average(losses, weights=weights)))
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingError(f"non-finite weights at epoch {epoch}")
        if x_val is None:
            hist.best_epoch = epoch
            continue
        v = _mse(policy, x_val, y_val)
        hist.val_loss.append(v)
        if v < best_val - 1e-12:
            best_val, bad, hist.best_epoch = v, 0, epoch
            best_state = copy.deepcopy((policy.layers, policy.head))
        else:
            bad += 1
            if bad >= config.patience:
                hist.stopped_early = True
                break
    if best_state is not None:
        policy.layers, policy.head = best_state
    policy.meta.update(train_config=asdict(config), best_epoch=hist.best_epoch,
                       epochs_run=len(hist.train_loss))
    return policy, hist


# --- evaluation -----------------------------------------------------------

def evaluate_offpolicy(policy: Policy, inputs: np.ndarray, labels: np.ndarray,
                       mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean absolute error and per-sample residuals (prediction minus label)."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = policy.forward(np.asarray(inputs).reshape(len(labels), -1))[0]
    resid = pred - np.asarray(labels)
    sel = resid if mask is None else resid[np.asarray(mask, dtype=bool)]
    if len(sel) == 0:
        raise ValueError("evaluation mask selects no samples")
    return float(np.mean(np.abs(sel))), resid


def extract_embeddings(policy: Policy, inputs: np.ndarray, location: str = "post_activation",
                       chunk: int = 4096) -> np.ndarray:
    """Activations of the last hidden block at the chosen tap, in inference mode."""
    if location not in EMBEDDING_LOCATIONS:
        raise ValueError(f"unknown embedding location {location!r}")
    if location == "post_norm" and not policy.spec.use_norm:
        raise ValueError("post_norm tap requires a policy with normalization")
    x = np.asarray(inputs, dtype=np.float64).reshape(-1, policy.spec.input_dim)
    parts = [policy.forward(x[i:i + chunk])[1][location]
             for i in range(0, len(x), chunk)]
    if not parts:
        return np.zeros((0, policy.spec.hidden[-1]))
    return np.concatenate(parts)


# --- storage --------------------------------------------------------------

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(format(v, ".17g")) for v in a.ravel()]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def policy_to_dict(policy: Policy) -> dict:
    layers = []
    for layer in policy.layers:
        entry = {"W": _arr(layer.W), "b": _arr(layer.b)}
        if policy.spec.use_norm:
            entry.update(gamma=_arr(layer.gamma), beta=_arr(layer.beta),
                         running_mean=_arr(layer.running_mean), running_var=_arr(layer.running_var))
        layers.append(entry)
    spec = asdict(policy.spec)
    spec["hidden"] = list(spec["hidden"])
    return {
        "format": POLICY_FORMAT,
        "spec": spec,
        "layers": layers,
        "head": {"W": _arr(policy.head.W), "b": _arr(policy.head.b)},
        "input_mean": _arr(policy.input_mean),
        "input_std": _arr(policy.input_std),
        "meta": policy.meta,
        "hash": policy.content_hash(),
    }


def policy_from_dict(d: dict) -> Policy:
    if d.get("format") != POLICY_FORMAT:
        raise PolicyFormatError(f"unsupported policy format {d.get('format')!r}")
    spec_d = dict(d["spec"])
    spec_d["hidden"] = tuple(spec_d["hidden"])
    spec = PolicySpec(**spec_d)
    layers = []
    for e in d["layers"]:
        layer = Layer(_unarr(e["W"]), _unarr(e["b"]))
        if spec.use_norm:
            layer.gamma, layer.beta = _unarr(e["gamma"]), _unarr(e["beta"])
            layer.running_mean, layer.running_var = _unarr(e["running_mean"]), _unarr(e["running_var"])
        layers.append(layer)
    head = Layer(_unarr(d["head"]["W"]), _unarr(d["head"]["b"]))
    policy = Policy(spec, layers, head, _unarr(d["input_mean"]), _unarr(d["input_std"]), d.get("meta"))
    if "hash" in d and d["hash"] != policy.content_hash():
        raise PolicyFormatError("policy hash mismatch; file is corrupted")
    return policy


def save_policy(policy: Policy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy)) + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> Policy:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return policy_from_dict(d)
