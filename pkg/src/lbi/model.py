"""Bounded-interface language model.

Each region k reads the token canvas plus a decoded interface vector,
runs its own layers, and hands exactly one thing to the next region:

    m_{k+1} = LN(m_k + alpha_k * Enc_k(pool(Phi_k(x_embed + Dec_k(m_k)))))

The loss head decodes m_K onto the canvas and projects to the vocabulary.
Nothing else crosses a region boundary; :func:`separator_audit` checks
that this holds for a given model object.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ArgumentError, Tape, Var
from .tensor import DimensionError, RngState

BACKENDS = ("mlp", "attention", "diag_ssm", "hybrid")
LAYER_KINDS = ("mlp", "attention", "diag_ssm")


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 256
    D: int = 64
    L: int = 128
    r: int = 8
    K: int = 4
    layers_per_region: int = 2
    backend: str = "mlp"
    schedule: tuple[str, ...] | None = None
    H: int = 4
    N: int = 4
    X: int = 128
    eps: float = 1e-5
    seed: int = 0
    n_layers: int | None = None
    dtype: str = "float64"
    alpha_init: float = 0.1

    def __post_init__(self):
        if self.schedule is not None:
            self.schedule = tuple(self.schedule)
        if self.backend == "hybrid" and self.schedule is None:
            self.schedule = ("diag_ssm",) * (self.K - 1) + ("attention",)
        self.validate()

    @classmethod
    def from_depth(cls, n_layers: int, region_size: int, **kw) -> "ModelConfig":
        """K = ceil(n_layers / region_size); the last region may be shorter."""
        K = -(-n_layers // region_size)
        return cls(K=K, layers_per_region=region_size, n_layers=n_layers, **kw)

    def validate(self):
        if self.r < 1 or self.K < 1:
            raise ConfigError("need r >= 1 and K >= 1")
        if self.r > self.D:
            raise ConfigError(f"interface rank r={self.r} exceeds width D={self.D}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "hybrid":
            if len(self.schedule) != self.K:
                raise ConfigError(f"hybrid schedule lists {len(self.schedule)} kinds for K={self.K}")
            bad = [s for s in self.schedule if s not in LAYER_KINDS]
            if bad:
                raise ConfigError(f"unknown kinds in schedule: {bad}")
        if "attention" in self.region_kinds() and self.D % self.H:
            raise ConfigError("D must be divisible by H")
        if self.n_layers is not None:
            if -(-self.n_layers // self.layers_per_region) != self.K:
                raise ConfigError("K must equal ceil(n_layers / layers_per_region)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    def region_kinds(self) -> list[str]:
        if self.backend == "hybrid":
            return list(self.schedule)
        return [self.backend] * self.K

    def region_layers(self, k: int) -> int:
        total = self.total_layers
        return min(self.layers_per_region, total - k * self.layers_per_region)

    @property
    def total_layers(self) -> int:
        return self.n_layers if self.n_layers is not None else self.K * self.layers_per_region

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule) if self.schedule is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(kind: str, cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    D, X, N = cfg.D, cfg.X, cfg.N
    out = []
    if kind == "attention":
        out += [("attn.wq", (D, D), "in"), ("attn.wk", (D, D), "in"),
                ("attn.wv", (D, D), "in"), ("attn.wo", (D, D), "out")]
    elif kind == "diag_ssm":
        out += [("ssm.w_u", (D, D), "in"), ("ssm.w_gate", (D, D), "in"),
                ("ssm.w_b", (D, N), "in"), ("ssm.w_c", (D, N), "in"),
                ("ssm.decay", (D, N), "decay"), ("ssm.w_o", (D, D), "out")]
    elif kind != "mlp":
        raise ConfigError(f"unknown layer kind {kind!r}")
    out += [("mlp.w1", (D, X), "in"), ("mlp.w2", (X, D), "out")]
    return out


def _draw(rng: np.random.Generator, shape, how: str) -> np.ndarray:
    if how == "decay":
        return rng.uniform(0.5, 0.95, size=shape)
    fan_in = shape[0]
    std = 1.0 / math.sqrt(fan_in)
    if how == "out":
        std *= 0.5
    return rng.standard_normal(shape) * std


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = RngState(cfg.seed).generator()
    D, r, V = cfg.D, cfg.r, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["embed"] = rng.standard_normal((V, D))
    p["init.proj"] = _draw(rng, (D, r), "in")
    for k, kind in enumerate(cfg.region_kinds()):
        pre = f"region{k}."
        p[pre + "dec.w1"] = _draw(rng, (r, D), "in")
        p[pre + "dec.w2"] = _draw(rng, (D, D), "out")
        for l in range(cfg.region_layers(k)):
            for name, shape, how in _layer_shapes(kind, cfg):
                p[f"{pre}layer{l}.{name}"] = _draw(rng, shape, how)
        p[pre + "enc.w1"] = _draw(rng, (D, D), "in")
        p[pre + "enc.w2"] = _draw(rng, (D, r), "in")
        p[pre + "alpha"] = np.array(cfg.alpha_init)
    p["head.dec.w1"] = _draw(rng, (r, D), "in")
    p["head.dec.w2"] = _draw(rng, (D, D), "out")
    p["head.proj"] = rng.standard_normal((D, V)) * 0.02
    return {k: np.asarray(v, dtype=cfg.np_dtype) for k, v in p.items()}


def dense_layer_kinds(cfg: ModelConfig) -> list[str]:
    kinds = []
    for k, kind in enumerate(cfg.region_kinds()):
        kinds += [kind] * cfg.region_layers(k)
    return kinds


def init_dense_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Same backend stack, plain residual wiring, no interface."""
    rng = RngState(cfg.seed).generator()
    D, V = cfg.D, cfg.vocab_size
    p = {"embed": rng.standard_normal((V, D))}
    for l, kind in enumerate(dense_layer_kinds(cfg)):
        for name, shape, how in _layer_shapes(kind, cfg):
            p[f"layer{l}.{name}"] = _draw(rng, shape, how)
    p["head.proj"] = rng.standard_normal((D, V)) * 0.02
    return {k: np.asarray(v, dtype=cfg.np_dtype) for k, v in p.items()}


def param_group(name: str) -> str:
    """'backend', 'interface' or 'embedding_head'."""
    if name in ("embed", "head.proj"):
        return "embedding_head"
    if ".layer" in name or name.startswith("layer"):
        return "backend"
    return "interface"


def param_counts(params: Mapping[str, np.ndarray]) -> dict[str, int]:
    counts = {"backend": 0, "interface": 0, "embedding_head": 0}
    for name, v in params.items():
        counts[param_group(name)] += int(np.size(v))
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# graph builders


class Binder:
    """Lazily puts named parameters on a tape, once each."""

    def __init__(self, tape: Tape, params: Mapping[str, np.ndarray]):
        self.tape = tape
        self.params = params
        self.vars: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self.vars.get(name)
        if v is None:
            v = self.tape.leaf(self.params[name], name)
            self.vars[name] = v
        return v


def _mlp(P, pre, h):
    return ad.silu(h @ P[pre + "mlp.w1"]) @ P[pre + "mlp.w2"]


def _attention(P, pre, h, cfg: ModelConfig):
    B, L, D = h.shape
    H = cfg.H
    dh = D // H

    def heads(w, axes):
        z = ad.reshape(h @ P[pre + w], (B, L, H, dh))
        return ad.transpose(z, axes)

    q = heads("attn.wq", (0, 2, 1, 3))
    kt = heads("attn.wk", (0, 2, 3, 1))
    v = heads("attn.wv", (0, 2, 1, 3))
    s = ad.scale(q @ kt, 1.0 / math.sqrt(dh))
    p = ad.softmax(s, causal=True)
    o = ad.reshape(ad.transpose(p @ v, (0, 2, 1, 3)), (B, L, D))
    return o @ P[pre + "attn.wo"]


def _diag_ssm(P, pre, h, cfg: ModelConfig):
    # per-channel diagonal recurrence, state N per channel:
    #   s_t[d, n] = decay[d, n] * gate_t[d] * s_{t-1}[d, n] + u_t[d] * b_t[n]
    #   y_t[d] = sum_n c_t[n] * s_t[d, n]
    u = h @ P[pre + "ssm.w_u"]
    gate = ad.sigmoid(h @ P[pre + "ssm.w_gate"])
    b = h @ P[pre + "ssm.w_b"]
    c = h @ P[pre + "ssm.w_c"]
    a = ad.mul_bcast(ad.expand(gate, -1, cfg.N), P[pre + "ssm.decay"])
    s = ad.linrec(a, ad.outer(u, b), axis=-3)
    return ad.contract(s, c) @ P[pre + "ssm.w_o"]


def layer_delta(kind: str, P, pre: str, x: Var, cfg: ModelConfig) -> Var:
    """Residual branch of one layer; the layer computes x + layer_delta(x)."""
    eps = cfg.eps
    if kind == "mlp":
        return _mlp(P, pre, ad.layer_norm(x, eps))
    if kind == "attention":
        a = _attention(P, pre, ad.layer_norm(x, eps), cfg)
    elif kind == "diag_ssm":
        a = _diag_ssm(P, pre, ad.layer_norm(x, eps), cfg)
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return a + _mlp(P, pre, ad.layer_norm(x + a, eps))


def phi_backend(kind: str, params: Mapping[str, np.ndarray], x: np.ndarray,
                cfg: ModelConfig) -> np.ndarray:
    """Eager evaluation of one layer's residual branch.

    ``params`` uses layer-local names (``mlp.w1``, ``attn.wq``, ...).
    """
    tape = Tape()
    out = layer_delta(kind, Binder(tape, params), "", tape.leaf(x), cfg)
    return out.value


def _decode(P, pre, m):
    return ad.silu(m @ P[pre + "dec.w1"]) @ P[pre + "dec.w2"]


def region_graph(P, k: int, m: Var, xe: Var, cfg: ModelConfig, bypass: Var | None = None):
    """Build region k on the tape. Returns (m_{k+1}, region output activations)."""
    pre = f"region{k}."
    L = xe.shape[-2]
    x = xe + ad.expand(_decode(P, pre, m), -2, L)
    if bypass is not None:
        x = x + bypass
    kind = cfg.region_kinds()[k]
    for l in range(cfg.region_layers(k)):
        x = x + layer_delta(kind, P, f"{pre}layer{l}.", x, cfg)
    enc = ad.silu(ad.mean_pool(x) @ P[pre + "enc.w1"]) @ P[pre + "enc.w2"]
    m_next = ad.layer_norm(m + ad.smul(P[pre + "alpha"], enc), cfg.eps)
    return m_next, x


def head_graph(P, m: Var, xe: Var, cfg: ModelConfig) -> Var:
    L = xe.shape[-2]
    z = ad.layer_norm(xe + ad.expand(_decode(P, "head.", m), -2, L), cfg.eps)
    return z @ P["head.proj"]


def init_graph(P, xe: Var) -> Var:
    return ad.mean_pool(xe) @ P["init.proj"]


# ---------------------------------------------------------------------------
# model object


@dataclass
class ForwardCache:
    """Boundary values sufficient to rebuild region k on its own."""

    k: int
    m_in: np.ndarray
    x_embed: np.ndarray
    m_out: np.ndarray


@dataclass
class ForwardResult:
    loss: float | None
    logits: np.ndarray
    caches: list[ForwardCache]
    chain: list[np.ndarray]
    x_embed: np.ndarray
    loss_value: np.ndarray | None = None


@dataclass
class FullGraph:
    """Whole-model tape plus the node ids a caller may need."""

    tape: Tape
    loss: Var | None
    logits: Var
    x_embed: Var
    chain: list[Var] = field(default_factory=list)


class LBIModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        # test fixture hook: feed region k's activations into region k+1
        self.bypass = False

    # -- pieces -------------------------------------------------------------

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (B, L), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ArgumentError("token id out of range")
        return tokens.astype(np.int64)

    def embed_tokens(self, tokens) -> np.ndarray:
        tokens = self.check_tokens(tokens)
        return self.params["embed"][tokens]

    def init_interface(self, x_embed: np.ndarray) -> np.ndarray:
        tape = Tape()
        return init_graph(Binder(tape, self.params), tape.leaf(x_embed)).value

    def region_forward(self, k: int, m_k: np.ndarray, x_embed: np.ndarray,
                       params: Mapping[str, np.ndarray] | None = None):
        """One transition m_k -> m_{k+1} on a private tape."""
        if m_k.ndim != 2 or m_k.shape[1] != self.cfg.r:
            raise DimensionError(f"interface state must be (B, {self.cfg.r}), got {m_k.shape}")
        tape = Tape()
        P = Binder(tape, self.params if params is None else params)
        mv, _ = region_graph(P, k, tape.leaf(m_k), tape.leaf(x_embed), self.cfg)
        return mv.value, ForwardCache(k, m_k, x_embed, mv.value)

    def loss_head(self, m_K: np.ndarray, x_embed: np.ndarray, targets=None):
        tape = Tape()
        logits = head_graph(Binder(tape, self.params), tape.leaf(m_K), tape.leaf(x_embed), self.cfg)
        loss = None if targets is None else ad.cross_entropy(logits, targets)
        return logits.value, (None if loss is None else loss.value)

    # -- whole model --------------------------------------------------------

    def forward(self, tokens, targets=None) -> ForwardResult:
        """Sequential interface chain with one small tape per region."""
        cfg = self.cfg
        tokens = self.check_tokens(tokens)
        xe = self.embed_tokens(tokens)
        m = self.init_interface(xe)
        chain = [m]
        caches = []
        prev_out = None
        for k in range(cfg.K):
            tape = Tape()
            P = Binder(tape, self.params)
            bypass = tape.leaf(prev_out) if (self.bypass and prev_out is not None) else None
            mv, xo = region_graph(P, k, tape.leaf(m), tape.leaf(xe), cfg, bypass)
            caches.append(ForwardCache(k, m, xe, mv.value))
            m = mv.value
            chain.append(m)
            prev_out = xo.value
        logits, loss = self.loss_head(m, xe, targets)
        return ForwardResult(None if loss is None else float(loss), logits, caches, chain, xe, loss)

    def record(self, tokens, targets=None, params: Mapping[str, np.ndarray] | None = None) -> FullGraph:
        """Record the whole model as one graph (the reference for gradients)."""
        cfg = self.cfg
        tokens = self.check_tokens(tokens)
        tape = Tape()
        P = Binder(tape, self.params if params is None else params)
        xe = ad.embedding(P["embed"], tokens)
        m = init_graph(P, xe)
        chain = [m]
        prev = None
        for k in range(cfg.K):
            m, xo = region_graph(P, k, m, xe, cfg, prev if self.bypass else None)
            prev = xo
            chain.append(m)
        logits = head_graph(P, m, xe, cfg)
        loss = ad.cross_entropy(logits, targets) if targets is not None else None
        tape.outputs = [loss.id if loss is not None else logits.id]
        return FullGraph(tape, loss, logits, xe, chain)

    def oracle_gradients(self, tokens, targets) -> tuple[float, dict[str, np.ndarray]]:
        g = self.record(tokens, targets)
        grads = ad.backward(g.tape, np.ones((), dtype=self.cfg.np_dtype), g.loss)
        return float(g.loss.value), grads

    def counts(self) -> dict[str, int]:
        return param_counts(self.params)


def dense_record(cfg: ModelConfig, params: Mapping[str, np.ndarray], tokens, targets=None):
    """Dense baseline graph: residual stack over the embedding, no interface."""
    tape = Tape()
    P = Binder(tape, params)
    x = ad.embedding(P["embed"], np.asarray(tokens))
    for l, kind in enumerate(dense_layer_kinds(cfg)):
        x = x + layer_delta(kind, P, f"layer{l}.", x, cfg)
    logits = ad.layer_norm(x, cfg.eps) @ P["head.proj"]
    loss = ad.cross_entropy(logits, targets) if targets is not None else None
    tape.outputs = [loss.id if loss is not None else logits.id]
    return tape, loss, logits


# ---------------------------------------------------------------------------
# structural audit


def separator_audit(model: LBIModel, tokens=None, seed: int = 0) -> bool:
    """True iff all cross-region dependence flows through the interface states.

    Three checks on the model as implemented:
    perturbing region j leaves the canvas and m_0..m_j bit-identical;
    replaying each region alone from (m_k, canvas) reproduces m_{k+1};
    cutting the cotangent at m_k leaves every parameter upstream of
    boundary k with an exactly zero gradient.
    """
    cfg = model.cfg
    rng = RngState(seed, 7).generator()
    if tokens is None:
        L = min(cfg.L, 16)
        tokens = rng.integers(0, cfg.vocab_size, size=(2, L + 1))
    tokens = np.asarray(tokens)
    inp, tgt = tokens[:, :-1], tokens[:, 1:]

    base = model.forward(inp, tgt)
    for j in range(cfg.K):
        pert = {n: (v + 0.1 * rng.standard_normal(v.shape).astype(v.dtype) if n.startswith(f"region{j}.") else v)
                for n, v in model.params.items()}
        other = LBIModel(cfg, pert)
        other.bypass = model.bypass
        res = other.forward(inp, tgt)
        if not np.array_equal(res.x_embed, base.x_embed):
            return False
        for k in range(j + 1):
            if not np.array_equal(res.chain[k], base.chain[k]):
                return False

    for k in range(cfg.K):
        m_next, _ = model.region_forward(k, base.chain[k], base.x_embed)
        if not np.array_equal(m_next, base.chain[k + 1]):
            return False

    g = model.record(inp, tgt)
    one = np.ones((), dtype=cfg.np_dtype)
    for k in range(1, cfg.K + 1):
        grads = ad.backward(g.tape, one, g.loss, blocked=[g.chain[k].id])
        upstream = ["init.proj"] + [n for n in grads if any(n.startswith(f"region{j}.") for j in range(k))]
        if any(np.any(grads[n] != 0) for n in upstream):
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"LBICKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: Mapping[str, np.ndarray], extra: dict | None = None) -> None:
    """Header (magic, version, JSON index) followed by raw little-endian tensors."""
    names = list(params)
    index = []
    offset = 0
    for n in names:
        a = np.asarray(params[n])
        index.append({"name": n, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                      "nbytes": a.nbytes})
        offset += a.nbytes
    header = json.dumps({"config": cfg.to_dict(), "tensors": index, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            a = np.ascontiguousarray(params[n])
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise IntegrityError("not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != _CKPT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        a = np.frombuffer(blob[start:start + t["nbytes"]], dtype=np.dtype(t["dtype"]))
        params[t["name"]] = a.reshape(t["shape"]).copy()
    return ModelConfig.from_dict(header["config"]), params, header.get("extra", {})
