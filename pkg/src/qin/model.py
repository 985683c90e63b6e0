"""The ranking network: decoupled ID/attribute attention fused under an
engagement gate, a target-attention unit on top, and an MLP head.

All tensors are batch-major: ``N`` candidate rows, each with an ``L``-slot
behavior subsequence produced by the relevance search. Padding slots carry
index 0 everywhere and are masked out of every softmax.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Node

GATE_MODES = ("vector_softmax", "scalar_sigmoid", "off")
VALUE_SOURCES = ("fused_fields", "id_only")
POOLINGS = ("FAU", "MEAN", "DIN_style", "SELF_ATTN_style", "DIF_style")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FauConfig:
    d: int = 8
    heads: int = 2
    alpha: float = 0.5
    gate_mode: str = "vector_softmax"
    value_source: str = "fused_fields"
    pooling: str = "FAU"
    gate_hidden: int = 8
    din_hidden: int = 16
    mlp: tuple = (16, 8)

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible into {self.heads} heads")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.value_source not in VALUE_SOURCES:
            raise ConfigError(f"unknown value_source {self.value_source!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling variant {self.pooling!r}")
        return self

    @property
    def head_dim(self):
        return self.d // self.heads

    @property
    def effective_gate(self):
        return "off" if self.pooling == "DIF_style" else self.gate_mode


# ablation names -> config overrides
MODEL_VARIANTS = {
    "QIN": {},
    "QIN_s": {"gate_mode": "scalar_sigmoid"},
    "QIN_id": {"value_source": "id_only"},
    "DIF_style": {"pooling": "DIF_style"},
    "SELF_ATTN_style": {"pooling": "SELF_ATTN_style"},
    "DIN_style": {"pooling": "DIN_style"},
    "MEAN": {"pooling": "MEAN"},
}


def variant_config(name: str, base: FauConfig | None = None) -> FauConfig:
    if name not in MODEL_VARIANTS:
        raise ConfigError(f"unknown model variant {name!r}; expected one of {sorted(MODEL_VARIANTS)}")
    return replace(base or FauConfig(), **MODEL_VARIANTS[name]).validate()


@dataclass
class Batch:
    """Model inputs for ``N`` candidate rows."""

    user: np.ndarray
    query: np.ndarray
    target: np.ndarray
    target_attr: np.ndarray
    seq_items: np.ndarray
    seq_attrs: np.ndarray
    seq_eng: np.ndarray
    seq_mask: np.ndarray

    def __len__(self):
        return len(self.target)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Lookup:
    """Rows ``table[index]`` kept symbolic.

    A projection ``table[index] @ W`` is taken as ``(table @ W)[index]``, so
    the matmul runs over the vocabulary instead of every sequence slot.
    """

    def __init__(self, table: Node, index, padding_idx: int | None = 0):
        self.table = table
        self.index = np.asarray(index)
        self.padding_idx = padding_idx
        self._node = None

    @property
    def shape(self):
        return self.index.shape + self.table.shape[1:]

    @property
    def value(self):
        return self.node().value

    def node(self) -> Node:
        if self._node is None:
            self._node = nx.embedding(self.table, self.index, self.padding_idx)
        return self._node

    def reshape(self, shape) -> "Lookup":
        return Lookup(self.table, self.index.reshape(shape), self.padding_idx)

    def gather(self, table_values: Node) -> Node:
        return nx.embedding(table_values, self.index, self.padding_idx)


def node_of(x) -> Node:
    return x.node() if isinstance(x, Lookup) else x


def project(x, W) -> Node:
    """``x @ W`` for a node or a :class:`Lookup`."""
    if isinstance(x, Lookup):
        return x.gather(nx.matmul(x.table, W))
    return nx.matmul(x, W)

def decoupled_scores(q_id, k_id, q_attr, k_attr, W: dict, head_dim: int):
    """Per-field scaled dot-product scores.

    ``q_*`` are (N, Lq, d) query-side embeddings and ``k_*`` (N, L, d)
    key-side embeddings; ``W`` holds q_id/k_id/q_attr/k_attr projections.
    """
    inv = 1.0 / math.sqrt(head_dim)
    att_id = nx.scale(nx.matmul(project(q_id, W["q_id"]), nx.transpose(project(k_id, W["k_id"]))), inv)
    att_attr = nx.scale(nx.matmul(project(q_attr, W["q_attr"]), nx.transpose(project(k_attr, W["k_attr"]))), inv)
    return att_id, att_attr


def engagement_gate(e_ed, w1, w2, mode: str, mask) -> Node:
    """One gate value per key position, shape (N, L)."""
    mask = np.asarray(mask, dtype=bool)
    dtype = (e_ed.table if isinstance(e_ed, Lookup) else e_ed).value.dtype
    if mode == "off":
        return nx.constant(np.ones(mask.shape, dtype=dtype))
    n, L, d = e_ed.shape
    if isinstance(e_ed, Lookup):
        # the gate depends on the engagement id alone
        logits = e_ed.gather(nx.matmul(nx.relu(nx.matmul(e_ed.table, w1)), w2))
    else:
        logits = nx.matmul(nx.relu(nx.matmul(e_ed, w1)), w2)
    logits = nx.reshape(logits, (n, L))
    if mode == "vector_softmax":
        return nx.masked_softmax(logits, mask, allow_empty=True)
    if mode == "scalar_sigmoid":
        return nx.mul(nx.sigmoid(logits), mask.astype(dtype))
    raise ConfigError(f"unknown gate_mode {mode!r}")


def fuse_scores(att_id, att_attr, gate, alpha: float) -> Node:
    """gate[c] * (alpha * att_id[r, c] + (1 - alpha) * att_attr[r, c])."""
    mixed = nx.add(nx.scale(att_id, alpha), nx.scale(att_attr, 1.0 - alpha))
    n, L = gate.shape
    return nx.mul(mixed, nx.reshape(gate, (n, 1, L)))


def attend(scores, key_mask, values) -> Node:
    """Softmax over live keys, then weight the (N, L, dh) values."""
    n, L = key_mask.shape
    probs = nx.masked_softmax(scores, np.asarray(key_mask, bool).reshape(n, 1, L), allow_empty=True)
    return nx.matmul(probs, values)


def _row_mask(x: Node, mask):
    m = np.asarray(mask, dtype=x.value.dtype)[..., None]
    return nx.mul(x, m)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class QIN:
    """Parameters plus forward pass.

    ``params`` maps names to parameter nodes; ``frozen`` flags the padding
    rows of the embedding tables, which stay zero for the model's lifetime.
    """

    def __init__(self, config: FauConfig, n_users: int, n_items: int, n_attrs: int,
                 n_queries: int, seq_len: int = 10, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.sizes = {"n_users": int(n_users), "n_items": int(n_items), "n_attrs": int(n_attrs),
                      "n_queries": int(n_queries), "seq_len": int(seq_len)}
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Node] = {}
        self.frozen: dict[str, np.ndarray] = {}
        self._build(seed)

    # -- construction -----------------------------------------------------

    def _add(self, name, rows, cols, rng, zeros=False):
        value = np.zeros((rows, cols), self.dtype) if zeros else nx.xavier_init(rows, cols, rng, self.dtype)
        self.params[name] = nx.parameter(value, name)

    def _add_table(self, name, rows, rng, padded=True):
        self._add(name, rows, self.config.d, rng)
        if padded:
            self.params[name].value[0] = 0
            self.frozen[name] = (np.arange(rows) == 0)[:, None]

    def _add_attention(self, prefix, rng, coupled):
        c = self.config
        for h in range(c.heads):
            names = ("q", "k", "v") if coupled else ("q_id", "k_id", "q_attr", "k_attr", "v")
            for nm in names:
                self._add(f"{prefix}.h{h}.{nm}", c.d, c.head_dim, rng)
        if not coupled and c.effective_gate != "off":
            self._add(f"{prefix}.gate.w1", c.d, c.gate_hidden, rng)
            self._add(f"{prefix}.gate.w2", c.gate_hidden, 1, rng)

    def _build(self, seed):
        c, s = self.config, self.sizes
        rng = np.random.default_rng(seed)
        self._add_table("emb.item", s["n_items"] + 1, rng)
        self._add_table("emb.attr", s["n_attrs"] + 1, rng)
        self._add_table("emb.eng", 16, rng)
        self._add_table("emb.user", s["n_users"], rng, padded=False)
        self._add_table("emb.query", s["n_queries"] + 1, rng)
        if c.pooling in ("FAU", "DIF_style"):
            self._add_attention("self", rng, coupled=False)
            self._add_attention("tgt", rng, coupled=False)
        elif c.pooling == "SELF_ATTN_style":
            self._add_attention("self", rng, coupled=True)
            self._add_attention("tgt", rng, coupled=True)
        elif c.pooling == "DIN_style":
            self._add("din.w1", 4 * c.d, c.din_hidden, rng)
            self._add("din.b1", 1, c.din_hidden, rng, zeros=True)
            self._add("din.w2", c.din_hidden, 1, rng)
        widths = [s["seq_len"] * c.d + 5 * c.d, *c.mlp, 1]
        for j in range(len(widths) - 1):
            self._add(f"mlp.w{j}", widths[j], widths[j + 1], rng)
            self._add(f"mlp.b{j}", 1, widths[j + 1], rng, zeros=True)

    # -- parameter plumbing ------------------------------------------------

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in self.params.items()}

    def state(self) -> dict:
        return {k: p.value for k, p in self.params.items()}

    def load_state(self, state: dict):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k!r}")
            if self.params[k].value.shape != v.shape:
                raise nx.DimensionError(f"{k}: checkpoint {v.shape} vs model {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=self.dtype)

    def astype(self, dtype):
        other = QIN(self.config, seed=0, dtype=dtype, **self.sizes)
        other.load_state(self.state())
        return other

    def _head_params(self, prefix, h, names):
        return {nm: self.params[f"{prefix}.h{h}.{nm}"] for nm in names}

    # -- layers -------------------------------------------------------------

    def _gate(self, prefix, e_ed, mask):
        mode = self.config.effective_gate
        if mode == "off":
            return engagement_gate(e_ed, None, None, "off", mask)
        return engagement_gate(e_ed, self.params[f"{prefix}.gate.w1"], self.params[f"{prefix}.gate.w2"], mode, mask)

    def fau_layer(self, e_id, e_attr, e_ed, mask) -> Node:
        """Self-attention over the subsequence; (N, L, d), padded rows zero."""
        c = self.config
        gate = self._gate("self", e_ed, mask)
        heads = []
        for h in range(c.heads):
            W = self._head_params("self", h, ("q_id", "k_id", "q_attr", "k_attr", "v"))
            att_id, att_attr = decoupled_scores(e_id, e_id, e_attr, e_attr, W, c.head_dim)
            fused = fuse_scores(att_id, att_attr, gate, c.alpha)
            values = project(e_id, W["v"])
            if c.value_source != "id_only":
                values = nx.add(values, project(e_attr, W["v"]))
            heads.append(attend(fused, mask, values))
        return _row_mask(nx.concat(heads, axis=-1), mask)

    def target_fau(self, t_id, t_attr, e_id, e_attr, seq_repr, e_ed, mask) -> Node:
        """Target item attends over the subsequence; (N, d)."""
        c = self.config
        n = t_id.shape[0]
        q_id = t_id.reshape((n, 1)) if isinstance(t_id, Lookup) else nx.reshape(t_id, (n, 1, c.d))
        q_attr = t_attr.reshape((n, 1)) if isinstance(t_attr, Lookup) else nx.reshape(t_attr, (n, 1, c.d))
        gate = self._gate("tgt", e_ed, mask)
        heads = []
        for h in range(c.heads):
            W = self._head_params("tgt", h, ("q_id", "k_id", "q_attr", "k_attr", "v"))
            att_id, att_attr = decoupled_scores(q_id, e_id, q_attr, e_attr, W, c.head_dim)
            fused = fuse_scores(att_id, att_attr, gate, c.alpha)
            heads.append(attend(fused, mask, nx.matmul(seq_repr, W["v"])))
        return nx.reshape(nx.concat(heads, axis=-1), (n, c.d))

    def _coupled_layer(self, prefix, queries, keys, values, mask):
        c = self.config
        inv = 1.0 / math.sqrt(c.head_dim)
        heads = []
        for h in range(c.heads):
            W = self._head_params(prefix, h, ("q", "k", "v"))
            s = nx.scale(nx.matmul(nx.matmul(queries, W["q"]), nx.transpose(nx.matmul(keys, W["k"]))), inv)
            heads.append(attend(s, mask, nx.matmul(values, W["v"])))
        return nx.concat(heads, axis=-1)

    def _mean(self, x, mask):
        m = np.asarray(mask, dtype=self.dtype)
        count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        return nx.mul(nx.sum_axis(_row_mask(x, mask), axis=1), 1.0 / count)

    def pooling_forward(self, e_id, e_attr, e_ed, t_id, t_attr, mask):
        """(sequence representation (N, L, d), target summary (N, d))."""
        c = self.config
        n = t_id.shape[0]
        if c.pooling in ("FAU", "DIF_style"):
            seq = self.fau_layer(e_id, e_attr, e_ed, mask)
            return seq, self.target_fau(t_id, t_attr, e_id, e_attr, seq, e_ed, mask)
        e_id, e_attr, t_id, t_attr = (node_of(x) for x in (e_id, e_attr, t_id, t_attr))
        value_in = e_id if c.value_source == "id_only" else nx.add(e_id, e_attr)
        t_val = t_id if c.value_source == "id_only" else nx.add(t_id, t_attr)
        if c.pooling == "MEAN":
            seq = _row_mask(value_in, mask)
            return seq, self._mean(value_in, mask)
        if c.pooling == "SELF_ATTN_style":
            seq = _row_mask(self._coupled_layer("self", value_in, value_in, value_in, mask), mask)
            tq = nx.reshape(t_val, (n, 1, c.d))
            out = self._coupled_layer("tgt", tq, value_in, seq, mask)
            return seq, nx.reshape(out, (n, c.d))
        if c.pooling == "DIN_style":
            L = mask.shape[1]
            t_rep = nx.mul(nx.reshape(t_val, (n, 1, c.d)), np.ones((1, L, 1), self.dtype))
            feats = nx.concat([t_rep, value_in, nx.sub(t_rep, value_in), nx.mul(t_rep, value_in)], axis=-1)
            hidden = nx.relu(nx.add(nx.matmul(feats, self.params["din.w1"]), self.params["din.b1"]))
            logits = nx.reshape(nx.matmul(hidden, self.params["din.w2"]), (n, 1, L))
            w = nx.masked_softmax(logits, np.asarray(mask, bool).reshape(n, 1, L), allow_empty=True)
            pooled = nx.reshape(nx.matmul(w, value_in), (n, c.d))
            return _row_mask(value_in, mask), pooled
        raise ConfigError(f"unknown pooling variant {c.pooling!r}")

    def predict(self, user_emb, query_emb, t_id, t_attr, seq_repr, target_out) -> Node:
        n = t_id.shape[0]
        L, d = seq_repr.shape[1], seq_repr.shape[2]
        x = nx.concat([nx.reshape(seq_repr, (n, L * d)), target_out, user_emb, query_emb, t_id, t_attr], axis=-1)
        layers = len(self.config.mlp) + 1
        for j in range(layers):
            x = nx.add(nx.matmul(x, self.params[f"mlp.w{j}"]), self.params[f"mlp.b{j}"])
            if j < layers - 1:
                x = nx.relu(x)
        return nx.sigmoid(x)

    def forward(self, batch: Batch) -> Node:
        """Click probability per candidate row, shape (N, 1)."""
        P = self.params
        mask = np.asarray(batch.seq_mask, dtype=bool)
        e_id = Lookup(P["emb.item"], batch.seq_items)
        e_attr = Lookup(P["emb.attr"], batch.seq_attrs)
        e_ed = Lookup(P["emb.eng"], batch.seq_eng)
        t_id = Lookup(P["emb.item"], batch.target)
        t_attr = Lookup(P["emb.attr"], batch.target_attr)
        seq, tgt = self.pooling_forward(e_id, e_attr, e_ed, t_id, t_attr, mask)
        user = nx.embedding(P["emb.user"], batch.user, padding_idx=None)
        return self.predict(user, nx.embedding(P["emb.query"], batch.query),
                            t_id.node(), t_attr.node(), seq, tgt)

    def loss(self, batch: Batch, labels) -> Node:
        return nx.bce(self.forward(batch), np.asarray(labels).reshape(-1, 1))

    def score(self, batch: Batch, chunk: int = 20_000) -> np.ndarray:
        out = []
        for lo in range(0, len(batch), chunk):
            sl = slice(lo, lo + chunk)
            sub = Batch(*(getattr(batch, f)[sl] for f in Batch.__dataclass_fields__))
            out.append(self.forward(sub).value.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0, self.dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"QINCKPT\0"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict):
    """Versioned header, then per parameter: name, shape, little-endian f32."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name in params:
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return params


def config_to_text(sections: dict) -> str:
    """Flat ``section.key = value`` lines, sorted for stable diffs."""
    lines = []
    for section in sorted(sections):
        body = sections[section]
        body = asdict(body) if hasattr(body, "__dataclass_fields__") else dict(body)
        for key in sorted(body):
            value = body[key]
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"
