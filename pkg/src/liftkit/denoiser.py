"""Bidirectional transformer denoiser and its checkpoint container.

Pre-norm blocks, learned absolute positional embeddings, GELU MLP with 4x
expansion, untied output head. Attention has no causal mask: every
position attends to every non-pad position, which is what lets a masked
slot use both left and right context.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .corpus import TokenSequence
from .diffusion import CorruptedSequence
from .errors import ConfigError, ContractError, InputError

CHECKPOINT_MAGIC = b"LKCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    max_seq_len: int = 256
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_heads, self.max_seq_len) < 1 or self.n_layers < 0:
            raise ConfigError("model dimensions must be positive (n_layers may be 0)")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        """Closed form; must equal the sum of all parameter sizes.

        embeddings: V*D + L_max*D
        per block:  attention 4*(D^2 + D), MLP D*4D + 4D + 4D*D + D,
                    two layer norms 2*2D
        final norm: 2D; head: D*V + V
        """
        d, v = self.d_model, self.vocab_size
        per_block = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d
        return v * d + self.max_seq_len * d + self.n_layers * per_block + 2 * d + d * v + v


class Denoiser:
    """p(x0 | xt): per-position log-probabilities over the vocabulary."""

    def __init__(self, config: ModelConfig, seed: int = 0, _empty: bool = False):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.forward_calls = 0  # instrumentation: one increment per forward pass
        if not _empty:
            self._init_params(rngmod.stream(seed, "init"))

    def _add_param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, v = c.d_model, c.vocab_size

        def w(*shape):
            return rng.normal(0.0, 0.02, shape)

        self._add_param("tok_emb", w(v, d))
        self._add_param("pos_emb", w(c.max_seq_len, d))
        for i in range(c.n_layers):
            p = f"blocks.{i}"
            self._add_param(f"{p}.ln1.gamma", np.ones(d))
            self._add_param(f"{p}.ln1.beta", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                self._add_param(f"{p}.attn.{proj}", w(d, d))
                self._add_param(f"{p}.attn.{proj[1]}b", np.zeros(d))
            self._add_param(f"{p}.ln2.gamma", np.ones(d))
            self._add_param(f"{p}.ln2.beta", np.zeros(d))
            self._add_param(f"{p}.mlp.w1", w(d, 4 * d))
            self._add_param(f"{p}.mlp.b1", np.zeros(4 * d))
            self._add_param(f"{p}.mlp.w2", w(4 * d, d))
            self._add_param(f"{p}.mlp.b2", np.zeros(d))
        self._add_param("ln_f.gamma", np.ones(d))
        self._add_param("ln_f.beta", np.zeros(d))
        self._add_param("head.w", w(d, v))
        self._add_param("head.b", np.zeros(v))

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        ids: np.ndarray,
        pad_id: int | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Log-probabilities [batch, seq, vocab] for a batch of id rows.

        Defined at every position, masked or not; rows exp-sum to 1.
        """
        c = self.config
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        b, t = ids.shape
        if t > c.max_seq_len:
            raise InputError(f"sequence length {t} exceeds max_seq_len {c.max_seq_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise InputError(f"token id out of range [0, {c.vocab_size})")
        if train and c.dropout_rate > 0.0 and rng is None:
            raise ContractError("training forward with dropout needs an rng")
        self.forward_calls += 1

        drop = c.dropout_rate

        def dp(x):
            return ad.dropout(x, drop, rng, train)

        pos = ad.embedding_lookup(self.params["pos_emb"], np.arange(t))
        x = ad.add(ad.embedding_lookup(self.params["tok_emb"], ids), pos)
        x = dp(x)

        attn_bias = None
        if pad_id is not None and np.any(ids == pad_id):
            bias = np.where(ids == pad_id, -1e30, 0.0)  # [b, t], applied over keys
            attn_bias = Tensor(bias[:, None, None, :])

        nh, hd = c.n_heads, c.head_dim
        inv_sqrt = 1.0 / np.sqrt(hd)
        for i in range(c.n_layers):
            p = f"blocks.{i}"
            h = ad.layer_norm(x, self.params[f"{p}.ln1.gamma"], self.params[f"{p}.ln1.beta"])

            def heads(proj):
                y = ad.add(ad.matmul(h, self.params[f"{p}.attn.{proj}"]), self.params[f"{p}.attn.{proj[1]}b"])
                return ad.transpose(ad.reshape(y, (b, t, nh, hd)), (0, 2, 1, 3))

            q, k, v = heads("wq"), heads("wk"), heads("wv")
            att = ad.scalar_scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            if attn_bias is not None:
                att = ad.add(att, attn_bias)
            att = dp(ad.softmax(att))
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, nh * hd))
            o = dp(ad.add(ad.matmul(o, self.params[f"{p}.attn.wo"]), self.params[f"{p}.attn.ob"]))
            x = ad.add(x, o)

            h = ad.layer_norm(x, self.params[f"{p}.ln2.gamma"], self.params[f"{p}.ln2.beta"])
            h = ad.gelu(ad.add(ad.matmul(h, self.params[f"{p}.mlp.w1"]), self.params[f"{p}.mlp.b1"]))
            h = dp(ad.add(ad.matmul(h, self.params[f"{p}.mlp.w2"]), self.params[f"{p}.mlp.b2"]))
            x = ad.add(x, h)

        x = ad.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        logits = ad.add(ad.matmul(x, self.params["head.w"]), self.params["head.b"])
        return ad.log_softmax(logits)

    def log_probs_eval(self, ids: np.ndarray, pad_id: int | None = None) -> np.ndarray:
        """Plain-array forward with no graph (selection/analysis/decoding)."""
        with ad.no_grad():
            return self.forward(ids, pad_id=pad_id, train=False).data


def confidence(
    model: Denoiser,
    corrupted: CorruptedSequence,
    clean: TokenSequence,
    pad_id: int | None = None,
    positions=None,
) -> dict[int, float]:
    """Probability assigned to the ground-truth token at masked positions.

    ``positions`` defaults to the whole mask set; asking for an unmasked
    position is a contract error.
    """
    masked = corrupted.mask_positions()
    if positions is None:
        positions = sorted(masked)
    else:
        positions = sorted(int(p) for p in positions)
        outside = [p for p in positions if p not in masked]
        if outside:
            raise ContractError(f"positions {outside} are not masked")
    logp = model.log_probs_eval(corrupted.ids[None, :], pad_id=pad_id)[0]
    return {p: float(np.exp(logp[p, clean.ids[p]])) for p in positions}


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, raw float64 slabs
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Denoiser, optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Versioned binary checkpoint; float64 buffers round-trip bit-exactly."""
    slabs: list[np.ndarray] = []
    param_manifest = []
    for name, p in model.params.items():
        param_manifest.append([name, list(p.data.shape)])
        slabs.append(p.data)
    opt_header = None
    if optimizer_state is not None:
        opt_header = {"step": int(optimizer_state["step"]), "tensors": []}
        for section in ("m", "v"):
            for name, arr in optimizer_state[section].items():
                opt_header["tensors"].append([section, name, list(arr.shape)])
                slabs.append(arr)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": param_manifest,
        "optimizer": opt_header,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for arr in slabs:
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_checkpoint(path) -> tuple[Denoiser, dict | None, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len).decode("utf-8"))

        def read_array(shape):
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ContractError(f"{path}: truncated checkpoint")
            return np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()

        model = Denoiser(ModelConfig(**header["config"]), _empty=True)
        for name, shape in header["params"]:
            model._add_param(name, read_array(shape))
        opt = None
        if header["optimizer"] is not None:
            opt = {"step": int(header["optimizer"]["step"]), "m": {}, "v": {}}
            for section, name, shape in header["optimizer"]["tensors"]:
                opt[section][name] = read_array(shape)
    return model, opt, header.get("extra", {})
