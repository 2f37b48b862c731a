"""Block-structured feature extractor with hand-written reverse-mode gradients.

The extractor is a chain of fully connected blocks. Every block except the
last applies an affine map followed by a nonlinearity; the last block is a
plain linear projection whose output is the classification feature. The
flattened output of every block is returned so that the regularizers can
act on intermediate representations.

Parameters live in a flat ``dict`` keyed ``block{b}.weight``,
``block{b}.bias`` and ``prototypes``, which is also what the optimizer, the
gradient checker and the checkpoint format see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, InvalidArgumentError, StateError
from .losses import LossConfig, poer_loss_and_grads
from .prototypes import DEFAULT_PROTOTYPES_PER_CLASS, classification_loss_and_grads, init_prototypes
from .rng import stream

NONLINEARITIES = ("relu", "tanh")
# a rectifier pre-activation counts as a kink only this close to zero; the
# widest stencil step (2 * eps = 2e-5 by default) moves a bias by exactly that
# much, and downstream weights can amplify it a few times
RELU_KINK_RADIUS = 1e-4


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture of the extractor.

    ``block_dims`` lists the output width of every block; the last entry is
    the width of the final linear projection.
    """

    input_dim: int = 32
    block_dims: tuple[int, ...] = (64, 64, 64, 64, 64, 32)
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(w) for w in self.block_dims))
        if len(self.block_dims) < 2:
            raise ConfigurationError(f"need at least 2 blocks, got {len(self.block_dims)}")
        if self.input_dim < 1 or min(self.block_dims) < 1:
            raise ConfigurationError("all dimensions must be >= 1")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}")

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    @property
    def feature_dim(self) -> int:
        return self.block_dims[-1]


@dataclass(frozen=True)
class OptimizerHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    half_life: int = 70

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment decay rates must lie in [0, 1)")
        if not self.eps > 0 or self.weight_decay < 0:
            raise ConfigurationError("eps must be > 0 and weight_decay >= 0")
        if self.half_life < 1:
            raise ConfigurationError(f"half_life must be >= 1, got {self.half_life}")


@dataclass
class ExtractorState:
    """Parameters plus AdamW moments. Mutated in place by :func:`optimizer_step`."""

    params: dict[str, np.ndarray]
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, np.zeros_like(p))
            self.exp_avg_sq.setdefault(name, np.zeros_like(p))

    def copy(self) -> "ExtractorState":
        return ExtractorState(
            params={k: v.copy() for k, v in self.params.items()},
            exp_avg={k: v.copy() for k, v in self.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in self.exp_avg_sq.items()},
            step=self.step,
        )


def param_names(cfg: ExtractorConfig) -> list[str]:
    names = []
    for b in range(cfg.n_blocks):
        names += [f"block{b}.weight", f"block{b}.bias"]
    return names + ["prototypes"]


def init_params(cfg: ExtractorConfig, n_classes: int, seed: int,
                per_class: int = DEFAULT_PROTOTYPES_PER_CLASS) -> dict[str, np.ndarray]:
    """He-style Gaussian weights (Xavier-style for tanh and the last block), zero biases."""
    rng = stream(seed, "init", "extractor")
    params = {}
    fan_in = cfg.input_dim
    for b, width in enumerate(cfg.block_dims):
        last = b == cfg.n_blocks - 1
        gain = 1.0 if (last or cfg.nonlinearity == "tanh") else 2.0
        params[f"block{b}.weight"] = rng.standard_normal((width, fan_in)) * math.sqrt(gain / fan_in)
        params[f"block{b}.bias"] = np.zeros(width)
        fan_in = width
    params["prototypes"] = init_prototypes(n_classes, per_class, cfg.feature_dim,
                                           stream(seed, "init", "prototypes"))
    return params


def new_state(cfg: ExtractorConfig, n_classes: int, seed: int,
              per_class: int = DEFAULT_PROTOTYPES_PER_CLASS) -> ExtractorState:
    return ExtractorState(init_params(cfg, n_classes, seed, per_class))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    # relu subgradient at 0 is 0
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - h * h


class Extractor:
    """Stateful forward/backward wrapper around a parameter dict.

    :meth:`forward` records the intermediates that :meth:`backward` consumes.
    """

    def __init__(self, cfg: ExtractorConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self._cache = None

    def forward(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise InvalidArgumentError(f"expected input of shape (B, {self.cfg.input_dim}), got {x.shape}")
        h = x
        inputs, pre, outs = [], [], []
        for b in range(self.cfg.n_blocks):
            w = self.params[f"block{b}.weight"]
            z = h @ w.T + self.params[f"block{b}.bias"]
            inputs.append(h)
            pre.append(z)
            h = z if b == self.cfg.n_blocks - 1 else _activate(z, self.cfg.nonlinearity)
            outs.append(h)
        self._cache = (inputs, pre, outs)
        return outs

    def backward(self, feature_grads) -> dict[str, np.ndarray]:
        """Gradients of block parameters given ``dL/d(block output)`` per block.

        Entries of ``feature_grads`` may be ``None`` for blocks the loss does
        not touch directly.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        inputs, pre, outs = self._cache
        n = self.cfg.n_blocks
        if len(feature_grads) != n:
            raise InvalidArgumentError(f"expected {n} feature gradients, got {len(feature_grads)}")
        grads = {}
        upstream = None
        for b in reversed(range(n)):
            g = feature_grads[b]
            if upstream is not None:
                g = upstream if g is None else g + upstream
            if g is None:
                g = np.zeros_like(outs[b])
            if b != n - 1:
                g = g * _activate_grad(pre[b], outs[b], self.cfg.nonlinearity)
            grads[f"block{b}.weight"] = g.T @ inputs[b]
            grads[f"block{b}.bias"] = g.sum(axis=0)
            upstream = g @ self.params[f"block{b}.weight"]
        return grads

    def kink_margin(self) -> float:
        """Smallest absolute pre-activation feeding a rectifier."""
        if self._cache is None or self.cfg.nonlinearity != "relu":
            return math.inf
        return float(min(np.abs(z).min() for z in self._cache[1][:-1]))

    def kink_score(self, threshold: float = 1e-3) -> float:
        """:meth:`kink_margin` rescaled so that ``RELU_KINK_RADIUS`` maps to ``threshold``."""
        return self.kink_margin() * threshold / RELU_KINK_RADIUS


def forward(x, params: dict[str, np.ndarray], cfg: ExtractorConfig) -> list[np.ndarray]:
    return Extractor(cfg, params).forward(x)


@dataclass
class ObjectiveResult:
    total: float
    cls: float
    poer: float
    breakdown: dict
    grads: dict[str, np.ndarray] | None
    kink_margin: float
    poer_evaluated: bool


def objective(params: dict[str, np.ndarray], x, y, d, cfg: ExtractorConfig,
              loss_cfg: LossConfig = LossConfig(), alpha: float = 0.1,
              use_rank: bool = True, use_cluster: bool = True,
              with_grad: bool = True) -> ObjectiveResult:
    """Total loss ``cls + alpha * poer`` for one batch, with exact gradients.

    With ``alpha == 0`` (or both regularizers disabled) the PoER terms are not
    evaluated at all, so they cannot leak into the gradients.
    """
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    net = Extractor(cfg, params)
    feats = net.forward(x)
    cls, g_last, g_proto, margin = classification_loss_and_grads(feats[-1], y, params["prototypes"])
    feature_grads: list[np.ndarray | None] = [None] * cfg.n_blocks
    feature_grads[-1] = g_last
    poer, breakdown = 0.0, {"rank": {}, "cluster": {}}
    run_poer = alpha > 0 and (use_rank or use_cluster)
    if run_poer:
        poer, breakdown, pgrads, pmargin = poer_loss_and_grads(feats, y, d, loss_cfg, use_rank, use_cluster)
        margin = min(margin, pmargin)
        for b, g in enumerate(pgrads):
            if g is not None:
                g = alpha * g
                feature_grads[b] = g if feature_grads[b] is None else feature_grads[b] + g
    total = cls + alpha * poer
    grads = None
    if with_grad:
        grads = net.backward(feature_grads)
        grads["prototypes"] = g_proto
    margin = min(margin, net.kink_score())
    return ObjectiveResult(total, cls, poer, breakdown, grads, margin, run_poer)


def lr_schedule(epoch: int, hyper: OptimizerHyper = OptimizerHyper()) -> float:
    """Step decay: the learning rate halves every ``hyper.half_life`` epochs."""
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {epoch}")
    return hyper.lr * 0.5 ** (epoch // hyper.half_life)


def optimizer_step(state: ExtractorState, grads: dict[str, np.ndarray],
                   hyper: OptimizerHyper = OptimizerHyper(), lr: float | None = None) -> ExtractorState:
    """One AdamW update with bias correction and decoupled weight decay.

    Parameters are first scaled by ``1 - lr * weight_decay`` and then moved
    by the bias-corrected moment ratio. ``lr`` defaults to ``hyper.lr``.
    """
    lr = hyper.lr if lr is None else lr
    for name in state.params:
        g = grads[name]
        if g.shape != state.params[name].shape:
            raise InvalidArgumentError(f"gradient for {name} has shape {g.shape}, expected {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        p *= 1.0 - lr * hyper.weight_decay
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"parameter {name} became non-finite at step {t}")
    return state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_path: str
    n_checked: int
    retries: int
    kink_margin: float
    flagged: list[str] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _path(name: str, index: tuple[int, ...]) -> str:
    return f"{name}[{', '.join(str(i) for i in index)}]"


def grad_check(fn: Callable, params: dict[str, np.ndarray], eps: float = 1e-5, *,
               loss_fn: Callable | None = None, kink_threshold: float = 1e-3,
               max_retries: int = 20, jitter: float = 1e-2, floor: float = 1e-6,
               tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``fn(params)`` must return ``(loss, grads, kink_margin)``; ``loss_fn``, if
    given, returns the loss alone and is used for the perturbed evaluations.
    When the point lies within ``kink_threshold`` of a non-smooth spot (hinge,
    argmin switch, rectifier, clamp) every parameter is jittered by
    ``jitter`` times its scale and the check is retried. If every retry stays
    near a kink, the point with the largest margin is checked.

    Derivatives use the fourth-order central stencil
    ``(-L(+2e) + 8 L(+e) - 8 L(-e) + L(-2e)) / 12e``. The relative error of
    one entry is ``|a - n| / max(|a|, |n|, floor)``; entries above ``tol``
    are listed in ``flagged``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise InvalidArgumentError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    if loss_fn is None:
        def loss_fn(p):
            return fn(p)[0]
    rng = stream(seed, "gradcheck")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    retries = 0
    _, grads, margin = fn(params)
    best = (margin, {k: v.copy() for k, v in params.items()}, grads)
    while margin < kink_threshold and retries < max_retries:
        retries += 1
        for v in params.values():
            scale = float(np.std(v)) or 1.0
            v += jitter * scale * rng.standard_normal(v.shape)
        _, grads, margin = fn(params)
        if margin > best[0]:
            best = (margin, {k: v.copy() for k, v in params.items()}, grads)
    # if no retry cleared the threshold, check the point farthest from any kink
    margin, params, grads = best

    worst, worst_path, flagged, count = 0.0, "", [], 0
    for name in sorted(params):
        p = params[name]
        for index in np.ndindex(p.shape):
            orig = p[index]
            values = []
            for step in (2, 1, -1, -2):
                p[index] = orig + step * eps
                values.append(loss_fn(params))
            p[index] = orig
            # differences first: equal evaluations must give exactly zero
            numeric = (8 * (values[1] - values[2]) - (values[0] - values[3])) / (12 * eps)
            analytic = float(grads[name][index])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            count += 1
            if err > tol:
                flagged.append(_path(name, index))
            if err > worst or not worst_path:
                worst, worst_path = err, _path(name, index)
    return GradCheckReport(worst, worst_path, count, retries, margin, flagged)


def objective_fn(x, y, d, cfg: ExtractorConfig, loss_cfg: LossConfig = LossConfig(),
                 alpha: float = 0.1, use_rank: bool = True, use_cluster: bool = True) -> Callable:
    """Bind a batch to :func:`objective`; returns ``(fn, loss_fn)`` for :func:`grad_check`."""

    def fn(params):
        res = objective(params, x, y, d, cfg, loss_cfg, alpha, use_rank, use_cluster)
        return res.total, res.grads, res.kink_margin

    def loss_fn(params):
        return objective(params, x, y, d, cfg, loss_cfg, alpha, use_rank, use_cluster, with_grad=False).total

    return fn, loss_fn


@dataclass
class CheckProblem:
    """A small, fully specified batch for gradient checking."""

    cfg: ExtractorConfig
    params: dict[str, np.ndarray]
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray


def gradcheck_problem(seed: int, n_classes: int = 4, n_domains: int = 2, per_cell: int = 2,
                      cfg: ExtractorConfig | None = None, per_class: int = 2,
                      input_scale: float = 0.3) -> CheckProblem:
    """Random smooth check point: a narrow six-block net and a stratified batch.

    Inputs are drawn with row norms near ``input_scale`` so block energies
    stay well below the exponent clamp, which keeps finite differences of the
    steep cluster term accurate.
    """
    cfg = cfg or ExtractorConfig(input_dim=5, block_dims=(8, 8, 8, 8, 8, 4))
    rng = stream(seed, "gradcheck", "batch")
    y = np.repeat(np.arange(n_classes), n_domains * per_cell)
    d = np.tile(np.repeat(np.arange(n_domains), per_cell), n_classes)
    x = rng.standard_normal((y.size, cfg.input_dim)) * input_scale / math.sqrt(cfg.input_dim)
    return CheckProblem(cfg, init_params(cfg, n_classes, seed, per_class), x, y, d)
