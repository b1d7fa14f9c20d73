"""Closed-form parameter and per-token FLOP accounting.

Counts are exact integers derived from the config, never measured. A
multiply-add is 2 flops; bias adds count 1 flop per element. Elementwise
nonlinearities, layer norms and softmax normalizers are excluded, so the
split isolates exactly the terms that scale with the architecture knobs:
with experts_per_token fixed, every category except "gating" is independent
of num_experts, and "gating" is linear in it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import MoeLmConfig, param_shapes

__all__ = ["FlopReport", "count_params_flops"]


@dataclass
class FlopReport:
    total_params: int
    active_params_per_token: int
    flops_per_token: dict[str, int]
    context_len: int

    @property
    def total_flops(self) -> int:
        return sum(self.flops_per_token.values())

    @property
    def non_gating_flops(self) -> int:
        return self.total_flops - self.flops_per_token["gating"]

    def lines(self) -> list[str]:
        out = [
            f"total parameters:            {self.total_params:>15,}",
            f"active parameters per token: {self.active_params_per_token:>15,}"
            f"  ({100.0 * self.active_params_per_token / self.total_params:.1f}%)",
            f"flops per token (context {self.context_len}):",
        ]
        for k in sorted(self.flops_per_token):
            out.append(f"  {k:<18} {self.flops_per_token[k]:>15,}")
        out.append(f"  {'total':<18} {self.total_flops:>15,}")
        return out


def _ffn_flops(d: int, f: int) -> int:
    # Two projections with bias adds.
    return 2 * d * f + f + 2 * f * d + d


def count_params_flops(config: MoeLmConfig, context_len: int | None = None) -> FlopReport:
    """Exact totals for one forward token at the given attention context."""
    if context_len is None:
        context_len = config.max_seq_len
    if not 1 <= context_len <= config.max_seq_len:
        raise ValueError(
            f"context_len must be in [1, {config.max_seq_len}], got {context_len}"
        )
    d, f = config.model_dim, config.ffn_dim
    e, k = config.num_experts, config.experts_per_token

    shapes = param_shapes(config)
    total = sum(int(s[0] if len(s) == 1 else s[0] * s[1]) for s in shapes.values())
    expert_params = d * f + f + f * d + d
    n_moe = len(config.moe_layers)
    n_dense = config.num_layers - n_moe
    active = total - n_moe * (e - k) * expert_params

    # Per token: 4 d*d projections plus QK^T and attn*V over the context.
    attention = config.num_layers * (8 * d * d + 4 * context_len * d)
    dense_ffn = n_dense * _ffn_flops(d, f)
    moe_expert = n_moe * k * _ffn_flops(d, f)
    gating = n_moe * 2 * d * e
    # Output projection to the vocab plus the positional add.
    embedding_softmax = 2 * d * config.vocab_size + d

    return FlopReport(
        total_params=int(total),
        active_params_per_token=int(active),
        flops_per_token={
            "attention": int(attention),
            "dense_ffn": int(dense_ffn),
            "moe_expert": int(moe_expert),
            "gating": int(gating),
            "embedding_softmax": int(embedding_softmax),
        },
        context_len=int(context_len),
    )
