"""Small encoder-decoder transformer over the circuit token vocabulary.

Trained from scratch; pre-LN blocks with GELU feed-forwards, learned
absolute positions, and a strictly causal decoder. The float-input variant
adds a shared (weight, bias) pair that injects <num> payloads into the
token embedding, which is the only parameter difference from the
token-only model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from . import vocab as V
from .formulations import TokenStream, TrainingPair


class ModelError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_layers_enc: int = 4
    n_layers_dec: int = 4
    n_heads: int = 8
    d_head: int = 32
    d_ff: int = 1024
    max_len: int = 512
    dropout: float = 0.1
    float_input: bool = False
    seed: int = 0
    dtype: str = "float32"  # "float64" for gradient-check mode

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def vocab_size(self) -> int:
        return len(V.vocabulary())

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)


def encode_stream(stream: TokenStream) -> tuple[list[int], list[float]]:
    """Token ids plus a payload lane (0.0 where there is no payload)."""
    ids = []
    payloads = []
    table = V.token_ids()
    for tok, payload in stream.items:
        if tok not in table:
            raise ModelError("UNKNOWN_TOKEN", f"token {tok!r} not in vocabulary")
        if payload is not None and not math.isfinite(payload):
            raise ModelError("NONFINITE_PAYLOAD", f"payload {payload!r}")
        ids.append(table[tok])
        payloads.append(float(payload) if payload is not None else 0.0)
    return ids, payloads


def decode_ids(ids: Sequence[int]) -> TokenStream:
    vocab = V.vocabulary()
    return TokenStream(tuple((vocab[i], 0.0 if vocab[i] == V.NUM else None) for i in ids))


class FloatEmbedder(nn.Module):
    """Shared linear map folding a float payload into the <num> embedding.

    Initialized at the same scale as the (sqrt-d-scaled) token embeddings so
    the payload signal is not drowned out before training picks it up.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_model))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, payloads: torch.Tensor, num_mask: torch.Tensor) -> torch.Tensor:
        # payloads: [B, T]; num_mask: [B, T] bool marking <num> positions.
        contrib = payloads.unsqueeze(-1) * self.weight + self.bias
        return contrib * num_mask.unsqueeze(-1).to(contrib.dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, query, key, value, mask):
        # mask: [B, 1|Tq, Tk] bool, True where attending is allowed.
        b, tq, _ = query.shape
        tk = key.shape[1]
        q = self.q(query).view(b, tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(key).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(value).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = self.dropout(scores.softmax(dim=-1))
        mixed = (attn @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out(mixed)


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)
        self.ff = FeedForward(cfg)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.dropout(self.attn(h, h, h, mask))
        return x + self.dropout(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg)
        self.cross_attn = MultiHeadAttention(cfg)
        self.ff = FeedForward(cfg)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_mask, cross_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, self_mask))
        x = x + self.dropout(self.cross_attn(self.norm2(x), memory, memory, cross_mask))
        return x + self.dropout(self.ff(self.norm3(x)))


class CircuitTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.float_emb = FloatEmbedder(cfg.d_model) if cfg.float_input else None
        self.emb_dropout = nn.Dropout(cfg.dropout)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers_enc))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers_dec))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        # Zero logits at init: the untrained model is exactly uniform.
        nn.init.zeros_(self.lm_head.weight)
        nn.init.zeros_(self.lm_head.bias)
        self.num_id = V.token_ids()[V.NUM]
        self.to(cfg.torch_dtype)

    def embed(self, ids: torch.Tensor, payloads: Optional[torch.Tensor] = None) -> torch.Tensor:
        if ids.shape[-1] > self.cfg.max_len:
            raise ModelError("LENGTH_EXCEEDED", f"{ids.shape[-1]} > {self.cfg.max_len}")
        positions = torch.arange(ids.shape[-1], device=ids.device)
        x = self.tok_emb(ids) * math.sqrt(self.cfg.d_model) + self.pos_emb(positions)
        if self.float_emb is not None and payloads is not None:
            x = x + self.float_emb(payloads, ids == self.num_id)
        return x

    def encode(self, ids, payloads, pad_mask):
        x = self.emb_dropout(self.embed(ids, payloads))
        attn_mask = pad_mask.unsqueeze(1)  # [B, 1, T]
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return self.enc_norm(x)

    def decode(self, dec_ids, memory, dec_pad_mask, enc_pad_mask):
        x = self.emb_dropout(self.embed(dec_ids))
        t = dec_ids.shape[1]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=dec_ids.device))
        self_mask = causal.unsqueeze(0) & dec_pad_mask.unsqueeze(1)
        cross_mask = enc_pad_mask.unsqueeze(1)
        for layer in self.decoder:
            x = layer(x, memory, self_mask, cross_mask)
        return self.lm_head(self.dec_norm(x))

    def forward(self, enc_ids, enc_payloads, enc_pad_mask, dec_ids, dec_pad_mask):
        memory = self.encode(enc_ids, enc_payloads, enc_pad_mask)
        return self.decode(dec_ids, memory, dec_pad_mask, enc_pad_mask)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_stream(self, stream: TokenStream) -> torch.Tensor:
        """Embedding vectors for one stream (no dropout); used by probes."""
        ids, payloads = encode_stream(stream)
        ids_t = torch.tensor([ids], dtype=torch.long)
        pay_t = torch.tensor([payloads], dtype=self.cfg.torch_dtype)
        return self.embed(ids_t, pay_t)[0]


@dataclass
class Batch:
    enc_ids: torch.Tensor
    enc_payloads: torch.Tensor
    enc_pad_mask: torch.Tensor
    dec_in: torch.Tensor
    dec_pad_mask: torch.Tensor
    targets: torch.Tensor  # pad positions hold pad_id (ignored by the loss)


def make_batch(pairs: Sequence[TrainingPair], cfg: ModelConfig) -> Batch:
    """Pad a list of training pairs into tensors; decoder input is the
    <bos>-shifted target."""
    pad_id = V.token_ids()[V.PAD]
    bos_id = V.token_ids()[V.BOS]

    enc = [encode_stream(p.encoder_input) for p in pairs]
    tgt = [encode_stream(p.decoder_target)[0] for p in pairs]
    t_enc = max(len(ids) for ids, _ in enc)
    t_dec = max(len(ids) for ids in tgt)
    if t_enc > cfg.max_len or t_dec > cfg.max_len:
        raise ModelError("LENGTH_EXCEEDED", f"enc {t_enc} / dec {t_dec} vs max {cfg.max_len}")

    b = len(pairs)
    enc_ids = torch.full((b, t_enc), pad_id, dtype=torch.long)
    enc_pay = torch.zeros((b, t_enc), dtype=cfg.torch_dtype)
    enc_mask = torch.zeros((b, t_enc), dtype=torch.bool)
    dec_in = torch.full((b, t_dec), pad_id, dtype=torch.long)
    dec_mask = torch.zeros((b, t_dec), dtype=torch.bool)
    targets = torch.full((b, t_dec), pad_id, dtype=torch.long)

    for i, ((ids, pays), t_ids) in enumerate(zip(enc, tgt)):
        enc_ids[i, : len(ids)] = torch.tensor(ids)
        enc_pay[i, : len(pays)] = torch.tensor(pays, dtype=cfg.torch_dtype)
        enc_mask[i, : len(ids)] = True
        shifted = [bos_id] + t_ids[:-1]
        dec_in[i, : len(shifted)] = torch.tensor(shifted)
        dec_mask[i, : len(shifted)] = True
        targets[i, : len(t_ids)] = torch.tensor(t_ids)
    return Batch(enc_ids, enc_pay, enc_mask, dec_in, dec_mask, targets)


def batch_loss(model: CircuitTransformer, batch: Batch) -> torch.Tensor:
    """Teacher-forced mean NLL over non-pad target positions."""
    logits = model(batch.enc_ids, batch.enc_payloads, batch.enc_pad_mask,
                   batch.dec_in, batch.dec_pad_mask)
    pad_id = V.token_ids()[V.PAD]
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1),
        ignore_index=pad_id,
    )


def pair_loss(model: CircuitTransformer, pair: TrainingPair) -> torch.Tensor:
    return batch_loss(model, make_batch([pair], model.cfg))


@torch.no_grad()
def greedy_generate(
    model: CircuitTransformer,
    encoder_inputs: Sequence[TokenStream],
    max_new: int = 256,
) -> list[TokenStream]:
    """Batched greedy decoding until <eos> (kept) or the step budget."""
    model.eval()
    cfg = model.cfg
    pad_id = V.token_ids()[V.PAD]
    bos_id = V.token_ids()[V.BOS]
    eos_id = V.token_ids()[V.EOS]

    enc = [encode_stream(s) for s in encoder_inputs]
    t_enc = max(len(ids) for ids, _ in enc)
    b = len(enc)
    enc_ids = torch.full((b, t_enc), pad_id, dtype=torch.long)
    enc_pay = torch.zeros((b, t_enc), dtype=cfg.torch_dtype)
    enc_mask = torch.zeros((b, t_enc), dtype=torch.bool)
    for i, (ids, pays) in enumerate(enc):
        enc_ids[i, : len(ids)] = torch.tensor(ids)
        enc_pay[i, : len(pays)] = torch.tensor(pays, dtype=cfg.torch_dtype)
        enc_mask[i, : len(ids)] = True

    memory = model.encode(enc_ids, enc_pay, enc_mask)
    dec = torch.full((b, 1), bos_id, dtype=torch.long)
    finished = torch.zeros(b, dtype=torch.bool)
    max_new = min(max_new, cfg.max_len - 1)
    for _ in range(max_new):
        dec_mask = torch.ones_like(dec, dtype=torch.bool)
        logits = model.decode(dec, memory, dec_mask, enc_mask)
        nxt = logits[:, -1].argmax(dim=-1)
        nxt = torch.where(finished, torch.full_like(nxt, pad_id), nxt)
        dec = torch.cat([dec, nxt.unsqueeze(1)], dim=1)
        finished |= nxt == eos_id
        if bool(finished.all()):
            break

    outputs = []
    for i in range(b):
        ids = []
        for t in dec[i, 1:].tolist():
            if t == pad_id:
                break
            ids.append(t)
            if t == eos_id:
                break
        outputs.append(decode_ids(ids))
    return outputs
