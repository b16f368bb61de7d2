"""Toy-scale audio-language regressor: frozen transformer base over audio
chunk projections and byte tokens, low-rank adapters on the attention query
and value projections, optional NF4 quantization of the frozen weights, and
a sigmoid regression head reading the last non-padding token.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, VocabError
from .windowing import BOS, EOS, PAD, SEP, VOCAB_SIZE, WindowExample

CHECKPOINT_VERSION = 1

# The 16 published 4-bit NormalFloat levels: exact 0 and +-1 endpoints,
# strictly increasing.
NF4_LEVELS = np.array([
    -1.0, -0.6961928009986877, -0.5250730514526367, -0.39491748809814453,
    -0.28444138169288635, -0.18477343022823334, -0.09105003625154495, 0.0,
    0.07958029955625534, 0.16093020141124725, 0.24611230194568634,
    0.33791524171829224, 0.44070982933044434, 0.5626170039176941,
    0.7229568362236023, 1.0,
], dtype=np.float64)

NF4_ZERO_CODE = 7
NF4_BLOCK = 64

# fixed affine normalization of log-mel inputs (corpus-typical statistics)
MEL_MEAN = -10.0
MEL_STD = 8.0


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    lora_rank: int = 0
    lora_dropout: float = 0.1
    quantize_base: bool = True
    head_only: bool = False
    audio_stride: int = 50   # mel frames per audio token
    n_mels: int = 64
    ffn_mult: int = 4
    max_seq: int = 2048

    @property
    def lora_alpha(self) -> float:
        return 2.0 * self.lora_rank

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if self.lora_rank == 0 and not self.head_only:
            raise ConfigError("no trainable body: lora_rank=0 requires head_only=true")
        if self.head_only and self.lora_rank != 0:
            raise ConfigError("head_only mode does not take adapters")


# --- NF4 blockwise quantization ---------------------------------------------

@dataclass
class QuantizedWeight:
    codes: np.ndarray    # uint8, two 4-bit codes per byte
    scales: np.ndarray   # float32 per 64-element block
    shape: tuple
    block: int = NF4_BLOCK

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    if len(codes) % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=codes.dtype)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def _unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(len(packed) * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def quantize_nf4(w, block: int = NF4_BLOCK) -> QuantizedWeight:
    """Blockwise NF4: per 64-element block, scale by the absmax and map each
    element to the nearest codebook level. All-zero blocks get scale 0 and
    the zero code."""
    arr = np.asarray(w, dtype=np.float64)
    flat = arr.reshape(-1)
    n = len(flat)
    n_blocks = (n + block - 1) // block
    padded = np.zeros(n_blocks * block)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    normed = blocks / safe[:, None]
    codes = np.abs(normed[:, :, None] - NF4_LEVELS[None, None, :]).argmin(axis=2)
    codes[scales == 0] = NF4_ZERO_CODE
    return QuantizedWeight(
        codes=_pack_nibbles(codes.reshape(-1).astype(np.uint8)),
        scales=scales.astype(np.float32),
        shape=arr.shape, block=block)


def dequantize_nf4(q: QuantizedWeight) -> np.ndarray:
    codes = _unpack_nibbles(q.codes, ((q.n_elements + q.block - 1) // q.block) * q.block)
    vals = NF4_LEVELS[codes].reshape(-1, q.block) * q.scales.astype(np.float64)[:, None]
    return vals.reshape(-1)[:q.n_elements].reshape(q.shape).astype(np.float32)


def nf4_max_gap() -> float:
    """Largest spacing between adjacent codebook levels (brute-force scan)."""
    return float(np.diff(NF4_LEVELS).max())


# --- LoRA --------------------------------------------------------------------

class LoraAdapter(nn.Module):
    """Rank-r factor pair. A is Gaussian (std 0.02), B starts at zero so a
    fresh adapter contributes nothing. Contribution is scaled by alpha/r."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 dropout: float, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        a = torch.empty(rank, d_in)
        a.normal_(0.0, 0.02, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        self.scale = alpha / rank
        self.drop = nn.Dropout(dropout)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * (self.drop(x) @ self.A.t() @ self.B.t())


def lora_apply(W, x, adapter: LoraAdapter, training: bool = False):
    """W @ x + (alpha/r) * B @ (A @ drop(x)) for a single input vector."""
    W = torch.as_tensor(W, dtype=adapter.A.dtype)
    x = torch.as_tensor(x, dtype=adapter.A.dtype)
    if W.shape[1] != x.shape[0] or adapter.A.shape[1] != x.shape[0]:
        raise ShapeError(f"W {tuple(W.shape)} / A {tuple(adapter.A.shape)} vs x {tuple(x.shape)}")
    adapter.train(training)
    return W @ x + adapter.scale * (adapter.B @ (adapter.A @ adapter.drop(x)))


class LoraLinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank adapter."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.adapter = LoraAdapter(base.in_features, base.out_features, rank, alpha,
                                   dropout, generator)

    def forward(self, x):
        return self.base(x) + self.adapter.delta(x)


# --- model -------------------------------------------------------------------

def sinusoidal_positions(max_len: int, d: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    idx = torch.arange(0, d, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, idx / d)
    pe = torch.zeros(max_len, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe.to(torch.float32)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.o_proj = nn.Linear(d, d)

    def forward(self, x, pad_mask):
        n, d = x.shape
        q = self.q_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        k = self.k_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        v = self.v_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.d_head)
        if pad_mask is not None:
            logits = logits.masked_fill(pad_mask[None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1)
        out = (att @ v).transpose(0, 1).reshape(n, d)
        return self.o_proj(out)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x, pad_mask):
        x = x + self.attn(self.ln1(x), pad_mask)
        return x + self.ffn(self.ln2(x))


class RegressionHead(nn.Module):
    """LayerNorm, two affine layers with a rectifier, sigmoid squashing.

    The output is clamped a hair inside (0, 1): float32 sigmoid rounds to
    exactly 1.0 past z ~ 17, which would break the open-interval contract."""

    _EDGE = 2.0 ** -20

    def __init__(self, d: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, 1)

    def forward(self, h):
        z = torch.sigmoid(self.fc2(F.relu(self.fc1(self.norm(h)))))
        return torch.clamp(z, self._EDGE, 1.0 - self._EDGE)


# modality type ids
TYPE_AUDIO, TYPE_PROMPT, TYPE_TRANSCRIPT, TYPE_SPECIAL = 0, 1, 2, 3


class BoundaryRegressor(nn.Module):
    """Sequence layout: [BOS] audio tokens [SEP] prompt [SEP] transcript [EOS],
    optionally followed by PAD. The head reads the final hidden state of the
    last non-padding token (the EOS)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.type_emb = nn.Embedding(4, d)
        self.audio_proj = nn.Linear(cfg.audio_stride * cfg.n_mels, d)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_seq, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers))
        self.head = RegressionHead(d)
        self.quantized: dict[str, QuantizedWeight] = {}

    # -- sequence assembly --

    def _embed(self, example: WindowExample, pad_to: int | None):
        dtype = self.tok_emb.weight.dtype
        mel = torch.as_tensor(np.ascontiguousarray(example.audio), dtype=dtype)
        mel = (mel - MEL_MEAN) / MEL_STD
        n_a = mel.shape[0] // self.cfg.audio_stride
        if n_a == 0:
            raise ShapeError(f"window too short: {mel.shape[0]} mel frames")
        chunks = mel[:n_a * self.cfg.audio_stride].reshape(n_a, -1)
        audio = self.audio_proj(chunks)

        for ids in (example.prompt_tokens, example.transcript_tokens):
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
                raise VocabError(f"token id outside vocab of {self.cfg.vocab_size}")
        prompt = torch.as_tensor(np.asarray(example.prompt_tokens, dtype=np.int64))
        trans = torch.as_tensor(np.asarray(example.transcript_tokens, dtype=np.int64))
        text_ids = torch.cat([
            torch.tensor([SEP]), prompt, torch.tensor([SEP]), trans, torch.tensor([EOS])])

        seq = torch.cat([self.tok_emb(torch.tensor([BOS])), audio, self.tok_emb(text_ids)])
        types = torch.cat([
            torch.tensor([TYPE_SPECIAL]),
            torch.full((n_a,), TYPE_AUDIO),
            torch.tensor([TYPE_SPECIAL]),
            torch.full((len(prompt),), TYPE_PROMPT),
            torch.tensor([TYPE_SPECIAL]),
            torch.full((len(trans),), TYPE_TRANSCRIPT),
            torch.tensor([TYPE_SPECIAL])])
        n_real = seq.shape[0]
        if pad_to is not None and pad_to > n_real:
            n_pad = pad_to - n_real
            seq = torch.cat([seq, self.tok_emb(torch.full((n_pad,), PAD))])
            types = torch.cat([types, torch.full((n_pad,), TYPE_SPECIAL)])
        n = seq.shape[0]
        if n > self.cfg.max_seq:
            raise ShapeError(f"sequence length {n} exceeds max_seq {self.cfg.max_seq}")
        x = seq + self.type_emb(types) + self.pos[:n]
        pad_mask = torch.zeros(n, dtype=torch.bool)
        pad_mask[n_real:] = True
        return x, pad_mask, n_real

    def forward(self, example: WindowExample, pad_to: int | None = None) -> torch.Tensor:
        x, pad_mask, n_real = self._embed(example, pad_to)
        mask = pad_mask if pad_mask.any() else None
        for block in self.blocks:
            x = block(x, mask)
        return self.head(x[n_real - 1]).squeeze()

    @torch.no_grad()
    def predict(self, example: WindowExample) -> float:
        was_training = self.training
        self.eval()
        try:
            return float(self.forward(example))
        finally:
            self.train(was_training)


def base_module_names(model: BoundaryRegressor) -> list[str]:
    """Names of the frozen linear layers eligible for NF4 quantization."""
    names = ["audio_proj"]
    for i in range(model.cfg.n_layers):
        names += [f"blocks.{i}.attn.{p}_proj" for p in "qkvo"]
        names += [f"blocks.{i}.ffn.0", f"blocks.{i}.ffn.2"]
    return names


def build_model(cfg: ModelConfig, base_seed: int = 0) -> BoundaryRegressor:
    """Deterministic construction: base and head weights depend only on
    (cfg shape, base_seed); adapters draw from a separate derived stream so
    every rank shares bit-identical base and head weights."""
    cfg.validate()
    torch.manual_seed(base_seed)
    model = BoundaryRegressor(cfg)
    if cfg.lora_rank > 0:
        attach_adapters(model, generator=torch.Generator().manual_seed(base_seed + 0x5EED))
    return model


def attach_adapters(model: BoundaryRegressor, generator: torch.Generator | None = None) -> None:
    """Wrap each layer's attention query and value projections with LoRA."""
    cfg = model.cfg
    for block in model.blocks:
        attn = block.attn
        attn.q_proj = LoraLinear(_unwrap(attn.q_proj), cfg.lora_rank, cfg.lora_alpha,
                                 cfg.lora_dropout, generator)
        attn.v_proj = LoraLinear(_unwrap(attn.v_proj), cfg.lora_rank, cfg.lora_alpha,
                                 cfg.lora_dropout, generator)


def _unwrap(layer):
    return layer.base if isinstance(layer, LoraLinear) else layer


def is_trainable_name(cfg: ModelConfig, name: str) -> bool:
    if name.startswith("head."):
        return True
    return not cfg.head_only and ".adapter." in name


def freeze_base(model: BoundaryRegressor) -> None:
    """Freeze everything but the head and (in LoRA mode) the adapters."""
    for name, p in model.named_parameters():
        p.requires_grad = is_trainable_name(model.cfg, name)


def trainable_parameters(model: BoundaryRegressor) -> dict[str, nn.Parameter]:
    """Head parameters, plus every adapter A/B in LoRA mode. The frozen base
    is always excluded."""
    model.cfg.validate()
    return {name: p for name, p in model.named_parameters()
            if is_trainable_name(model.cfg, name)}


def quantize_base_weights(model: BoundaryRegressor) -> None:
    """Pass every frozen linear weight through the NF4 round trip, keeping
    the codes for checkpointing. Idempotent: requantizing dequantized values
    reproduces the same codes."""
    model.quantized = {}
    for name in base_module_names(model):
        mod = _unwrap(model.get_submodule(name))
        q = quantize_nf4(mod.weight.detach().cpu().numpy())
        model.quantized[name] = q
        with torch.no_grad():
            mod.weight.copy_(torch.from_numpy(dequantize_nf4(q)))


def finalize_base(model: BoundaryRegressor) -> None:
    """Freeze the base and apply NF4 quantization when configured. Call after
    any base pretraining and before fine-tuning."""
    if model.cfg.quantize_base:
        quantize_base_weights(model)
    freeze_base(model)


def parameter_counts(model: BoundaryRegressor) -> dict[str, int]:
    trainable = trainable_parameters(model)
    return {
        "trainable": sum(p.numel() for p in trainable.values()),
        "adapter": sum(p.numel() for n, p in trainable.items() if ".adapter." in n),
        "head": sum(p.numel() for n, p in trainable.items() if n.startswith("head.")),
        "total": sum(p.numel() for p in model.parameters()),
    }


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(ckpt_dir, model: BoundaryRegressor, base_seed: int, extra: dict | None = None) -> None:
    """Adapters+head in tuned.npz, frozen base in base.npz, config in JSON."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tuned, base = {}, {}
    names = set(trainable_parameters(model))
    for name, p in model.named_parameters():
        (tuned if name in names else base)[name] = p.detach().cpu().numpy()
    np.savez(ckpt_dir / "base.npz", **base)
    np.savez(ckpt_dir / "tuned.npz", **tuned)
    meta = {"version": CHECKPOINT_VERSION, "base_seed": base_seed,
            "model": asdict(model.cfg)}
    if extra:
        meta.update(extra)
    with open(ckpt_dir / "config.json", "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_checkpoint(ckpt_dir) -> tuple[BoundaryRegressor, dict]:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "config.json") as f:
        meta = json.load(f)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig(**meta["model"])
    model = build_model(cfg, base_seed=meta["base_seed"])
    state = dict(np.load(ckpt_dir / "base.npz"))
    state.update(dict(np.load(ckpt_dir / "tuned.npz")))
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(state[name]))
    if cfg.quantize_base:
        quantize_base_weights(model)  # rebuild codes; idempotent on weights
    freeze_base(model)
    return model, meta
