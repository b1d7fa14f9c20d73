"""Parameter and FLOP accounting invariants."""

import pytest

from moefusion.accounting import FlopReport, count_params_flops
from moefusion.model import MoeLmConfig, param_shapes


FULL = MoeLmConfig()


def tiny(**kw):
    base = dict(num_layers=2, model_dim=16, num_heads=2, head_dim=8,
                num_experts=4, experts_per_token=2, vocab_size=64,
                max_seq_len=32)
    base.update(kw)
    return MoeLmConfig(**base)


class TestTotals:
    def test_full_scale_exact_values(self):
        rep = count_params_flops(FULL)
        assert rep.total_params == 1_882_976_256
        assert rep.active_params_per_token == 126_231_552

    def test_totals_within_published_windows(self):
        rep = count_params_flops(FULL)
        assert abs(rep.total_params - 1.9e9) / 1.9e9 < 0.15
        assert abs(rep.active_params_per_token - 145e6) / 145e6 < 0.20

    def test_active_ratio_under_eight_percent(self):
        rep = count_params_flops(FULL)
        assert rep.active_params_per_token / rep.total_params < 0.08

    def test_total_matches_declared_shapes(self):
        for cfg in (FULL, tiny(), tiny(tied_embeddings=False)):
            rep = count_params_flops(cfg)
            declared = sum(
                int(a * b) if len(s) == 2 else int(s[0])
                for s in param_shapes(cfg).values()
                for a, b in [s if len(s) == 2 else (s[0], 1)]
            )
            assert rep.total_params == declared

    def test_dense_model_fully_active(self):
        cfg = tiny(num_experts=2, experts_per_token=2)
        rep = count_params_flops(cfg)
        assert rep.active_params_per_token == rep.total_params


class TestComputeParity:
    def test_non_gating_flops_independent_of_expert_count(self):
        reports = [count_params_flops(tiny(num_experts=e)) for e in (2, 8, 64)]
        vals = {r.non_gating_flops for r in reports}
        assert len(vals) == 1

    def test_parity_at_full_scale(self):
        base = MoeLmConfig().to_dict()
        reports = []
        for e in (2, 8, 64):
            base["num_experts"] = e
            reports.append(count_params_flops(MoeLmConfig.from_dict(base)))
        assert len({r.non_gating_flops for r in reports}) == 1

    def test_gating_cost_linear_in_experts(self):
        r2 = count_params_flops(tiny(num_experts=2))
        r8 = count_params_flops(tiny(num_experts=8))
        assert r8.flops_per_token["gating"] == 4 * r2.flops_per_token["gating"]

    def test_total_params_grow_with_experts(self):
        r2 = count_params_flops(tiny(num_experts=2))
        r8 = count_params_flops(tiny(num_experts=8))
        assert r8.total_params > r2.total_params
        # active set differs only by the wider gate matrix
        cfg = tiny()
        n_moe = len(cfg.moe_layers)
        assert r8.active_params_per_token - r2.active_params_per_token == \
            n_moe * cfg.model_dim * (8 - 2)


class TestFlopDetail:
    def test_component_sum_equals_total(self):
        rep = count_params_flops(FULL)
        assert rep.total_flops == sum(rep.flops_per_token.values())

    def test_moe_scales_with_k(self):
        r1 = count_params_flops(tiny(experts_per_token=1))
        r2 = count_params_flops(tiny(experts_per_token=2))
        assert r2.flops_per_token["moe_expert"] == \
            2 * r1.flops_per_token["moe_expert"]

    def test_attention_grows_with_context(self):
        short = count_params_flops(tiny(), context_len=8)
        long = count_params_flops(tiny(), context_len=16)
        d = tiny().model_dim
        per_layer = 4 * d * (16 - 8)
        grew = long.flops_per_token["attention"] - \
            short.flops_per_token["attention"]
        assert grew == per_layer * tiny().num_layers

    def test_default_context_is_full_window(self):
        assert count_params_flops(FULL).context_len == FULL.max_seq_len

    def test_context_len_validated(self):
        with pytest.raises(ValueError):
            count_params_flops(tiny(), context_len=0)
        with pytest.raises(ValueError):
            count_params_flops(tiny(), context_len=1000)

    def test_lines_render_totals(self):
        rep = count_params_flops(FULL)
        text = "\n".join(rep.lines())
        assert "1,882,976,256" in text
        assert "126,231,552" in text

    def test_report_is_plain_ints(self):
        rep = count_params_flops(FULL)
        assert isinstance(rep, FlopReport)
        assert isinstance(rep.total_params, int)
        assert all(isinstance(v, int) for v in rep.flops_per_token.values())
