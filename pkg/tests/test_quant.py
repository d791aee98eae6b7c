from __future__ import annotations

import numpy as np
import pytest

from gsir.core import GaussianSet
from gsir.quant import (
    ATTRIBUTES,
    AttrQuant,
    BadMagicError,
    QuantError,
    RangeStrategy,
    StreamMeta,
    TruncatedStreamError,
    UnsupportedVersionError,
    bits_per_primitive,
    decode_bitstream,
    default_global_spec,
    dequantize_values,
    derive_ranges,
    encode_bitstream,
    loss_q,
    quantize,
    quantize_roundtrip,
    quantize_values,
    ste_quantize,
    storage_spec,
    uniform_spec,
)
from gsir.rng import named_rng

from conftest import random_scene


def stream_meta(gset, width=64, height=64, strategy=RangeStrategy.GLOBAL):
    counts = tuple(int(np.sum(gset.stage_id == s)) for s in range(1, int(gset.stage_id.max(initial=1)) + 1))
    return StreamMeta(width=width, height=height, n_stages=len(counts), strategy=strategy, stage_counts=counts)


class TestScalarQuantizer:
    def test_range_origin_maps_to_symbol_zero(self):
        aq = AttrQuant(bits=8, alpha=1.0, beta=0.25)
        sym = quantize_values(np.array([0.25]), aq)
        assert sym[0] == 0
        assert dequantize_values(sym, aq)[0] == 0.25

    def test_range_end_maps_to_top_symbol(self):
        aq = AttrQuant(bits=8, alpha=1.0, beta=0.25)
        sym = quantize_values(np.array([1.25]), aq)
        assert sym[0] == 255
        assert dequantize_values(sym, aq)[0] == pytest.approx(1.25, abs=1e-12)

    def test_half_step_bound_b8(self):
        aq = AttrQuant(bits=8, alpha=1.0, beta=0.0)
        x = np.array([0.5])
        err = abs(dequantize_values(quantize_values(x, aq), aq)[0] - 0.5)
        assert err <= 1.0 / 510.0 + 1e-15

    def test_roundtrip_half_step_bound_bulk(self):
        rng = named_rng(0, "q-bulk")
        for bits in (1, 4, 8, 12, 16):
            aq = AttrQuant(bits=bits, alpha=2.5, beta=-1.0)
            x = rng.uniform(-1.0, 1.5, 20000)
            err = np.abs(x - dequantize_values(quantize_values(x, aq), aq))
            assert np.max(err) <= aq.step / 2 + 1e-12

    def test_monotone_nondecreasing(self):
        aq = AttrQuant(bits=6, alpha=1.0, beta=0.0)
        x = np.sort(named_rng(1, "q-mono").uniform(-0.2, 1.2, 5000))
        sym = quantize_values(x, aq)
        assert np.all(np.diff(sym.astype(int)) >= 0)

    def test_out_of_range_clamped(self):
        aq = AttrQuant(bits=8, alpha=1.0, beta=0.0)
        assert quantize_values(np.array([-5.0]), aq)[0] == 0
        assert quantize_values(np.array([5.0]), aq)[0] == 255

    def test_invalid_spec_rejected(self):
        with pytest.raises(QuantError):
            AttrQuant(bits=8, alpha=0.0, beta=0.0)
        with pytest.raises(QuantError):
            AttrQuant(bits=0, alpha=1.0, beta=0.0)
        with pytest.raises(QuantError):
            AttrQuant(bits=17, alpha=1.0, beta=0.0)


class TestDeriveRanges:
    def test_global_returns_base_verbatim(self):
        base = default_global_spec()
        gset = random_scene(named_rng(2, "dr"), 10, 64, 64)
        assert derive_ranges(gset, RangeStrategy.GLOBAL, base, 64, 64) is base

    def test_per_image_covers_outlier_adaptive_excludes(self):
        gset = random_scene(named_rng(3, "dr"), 400, 64, 64, color_range=(-0.5, 0.5))
        gset.color[7, 0] = 50.0  # planted outlier
        per_img = derive_ranges(gset, RangeStrategy.PER_IMAGE, width=64, height=64)
        adaptive = derive_ranges(gset, RangeStrategy.ADAPTIVE, width=64, height=64)
        assert per_img.color.beta + per_img.color.alpha >= 50.0
        assert adaptive.color.beta + adaptive.color.alpha < 50.0

    def test_adaptive_offsets_respect_clamp(self):
        rng = named_rng(4, "dr")
        gset = random_scene(rng, 300, 64, 64)
        gset.color = rng.standard_cauchy((300, 3)) * 100.0  # heavy tails
        base = default_global_spec()
        adaptive = derive_ranges(gset, RangeStrategy.ADAPTIVE, base, 64, 64)
        assert adaptive.color.alpha == pytest.approx(1.5 * base.color.alpha)

    def test_empty_set_rejected_for_data_dependent(self):
        with pytest.raises(QuantError):
            derive_ranges(GaussianSet.empty(), RangeStrategy.PER_IMAGE, width=8, height=8)
        with pytest.raises(QuantError):
            derive_ranges(GaussianSet.empty(), RangeStrategy.ADAPTIVE, width=8, height=8)


class TestSteQuantize:
    def test_in_range_passes_gradient(self):
        gset = random_scene(named_rng(5, "ste"), 20, 64, 64, color_range=(-0.5, 0.5))
        qset, mask = ste_quantize(gset, default_global_spec(), 64, 64)
        assert mask.mu.all()
        assert mask.color.all()
        assert qset.count == 20

    def test_clamped_values_block_gradient(self):
        gset = random_scene(named_rng(6, "ste"), 5, 64, 64)
        gset.color[2, 1] = 10.0  # outside the [-2, 2] base color range
        _, mask = ste_quantize(gset, default_global_spec(), 64, 64)
        assert not mask.color[2, 1]
        assert mask.color[0, 0]

    def test_forward_equals_roundtrip(self):
        gset = random_scene(named_rng(7, "ste"), 15, 64, 64)
        spec = default_global_spec()
        qset, _ = ste_quantize(gset, spec, 64, 64)
        assert qset.allclose(quantize_roundtrip(gset, spec, 64, 64))


class TestLossQ:
    def test_on_grid_parameters_zero_error_term(self):
        spec = default_global_spec()
        gset = random_scene(named_rng(8, "lq"), 12, 32, 32, color_range=(-1.5, 1.5))
        snapped = quantize_roundtrip(gset, spec, 32, 32)
        target = np.zeros((32, 32, 3))
        from gsir.render import render
        from gsir.metrics import loss_render

        with_gamma = loss_q(snapped, spec, target, gamma=10.0)
        render_only = loss_render(render(snapped, 32, 32), target).total
        assert with_gamma == pytest.approx(render_only, abs=1e-12)

    def test_gamma_zero_is_pure_render_loss(self):
        spec = default_global_spec()
        gset = random_scene(named_rng(9, "lq"), 12, 32, 32)
        target = np.zeros((32, 32, 3))
        from gsir.render import render
        from gsir.metrics import loss_render

        q = loss_q(gset, spec, target, gamma=0.0)
        expected = loss_render(render(quantize_roundtrip(gset, spec, 32, 32), 32, 32), target).total
        assert q == expected

    def test_high_precision_limit_approaches_unquantized(self):
        from gsir.render import render
        from gsir.metrics import loss_render
        from gsir.synthetic import natural_image

        target = natural_image(40, 32, 32)
        gset = random_scene(named_rng(10, "lq"), 60, 32, 32, color_range=(-0.8, 0.8))
        unquantized = loss_render(render(gset, 32, 32), target).total
        q16 = loss_q(gset, uniform_spec(16), target, gamma=0.0)
        assert abs(q16 - unquantized) < 1e-3


class TestQuantAwareFinetune:
    def test_beats_post_hoc_quantization_on_toy_corpus(self):
        from gsir.metrics import loss_render
        from gsir.quant import ABLATION_BITS
        from gsir.render import render
        from gsir.stagewise import (
            FinetuneConfig,
            LinearPredictor,
            PODConfig,
            StageControlConfig,
            encode_image,
            finetune_train,
            pod_train,
        )

        corpus = []
        for i in range(16):
            rng = named_rng(i, "toy-corpus")
            gs = GaussianSet.from_arrays(
                mu=rng.uniform(2, 14, (2, 2)),
                log_scale=np.log(rng.uniform(1.0, 3.0, (2, 2))),
                theta=rng.uniform(0, np.pi, 2),
                color=rng.uniform(0.2, 0.9, (2, 3)),
            )
            corpus.append(np.clip(render(gs, 16, 16), 0, 1))
        control = StageControlConfig(patch_size=14, n_stages=2)
        base, _, _ = pod_train(
            LinearPredictor(14, 2), corpus,
            PODConfig(steps=400, milestones=(0, 200), refine_method="gd"), control, seed=0,
        )
        spec = default_global_spec(ABLATION_BITS)

        def quantized_loss(model):
            vals = []
            for img in corpus:
                state = encode_image(img, model, control)
                q = quantize_roundtrip(state.accumulated, spec, 16, 16)
                vals.append(loss_render(render(q, 16, 16), img).total)
            return float(np.mean(vals))

        plain, _, _ = finetune_train(
            base.copy(), corpus, FinetuneConfig(steps=200, predictor_lr=3e-4), control, seed=1
        )
        aware, _, _ = finetune_train(
            base.copy(), corpus,
            FinetuneConfig(steps=200, predictor_lr=3e-4, quant_spec=spec, quant_gamma=0.1),
            control, seed=1,
        )
        assert quantized_loss(aware) < quantized_loss(plain)


class TestBitstream:
    def test_empty_set_header_only(self):
        gset = GaussianSet.empty()
        meta = StreamMeta(width=16, height=16, n_stages=1, strategy=RangeStrategy.GLOBAL, stage_counts=(0,))
        blob = encode_bitstream(gset, default_global_spec(), meta)
        decoded, spec, meta2 = decode_bitstream(blob)
        assert decoded.count == 0
        assert meta2 == meta

    def test_roundtrip_bit_exact_random_sets(self):
        spec = default_global_spec()
        for trial in range(20):
            rng = named_rng(trial, "bs")
            n = int(rng.integers(0, 400))
            gset = random_scene(rng, n, 64, 48) if n else GaussianSet.empty()
            if n:
                gset.stage_id = np.sort(rng.integers(1, 4, n)).astype(np.int32)
            counts = tuple(int(np.sum(gset.stage_id == s)) for s in (1, 2, 3))
            meta = StreamMeta(width=64, height=48, n_stages=3, strategy=RangeStrategy.ADAPTIVE, stage_counts=counts)
            blob = encode_bitstream(gset, spec, meta)
            decoded, dspec, dmeta = decode_bitstream(blob)
            reference = quantize_roundtrip(gset, storage_spec(spec), 64, 48)
            assert np.array_equal(decoded.mu, reference.mu)
            assert np.array_equal(decoded.log_scale, reference.log_scale)
            assert np.array_equal(decoded.theta, reference.theta)
            assert np.array_equal(decoded.color, reference.color)
            assert np.array_equal(decoded.stage_id, gset.stage_id)
            # encode twice -> byte-identical
            assert encode_bitstream(gset, spec, meta) == blob

    def test_payload_size_arithmetic(self):
        spec = default_global_spec()
        # 2x16 (centers) + 2x12 (log-scales) + 8 (theta) + 3x8 (color)
        assert bits_per_primitive(spec) == 88
        gset = random_scene(named_rng(11, "bs-size"), 33, 64, 64)
        meta = stream_meta(gset)
        blob = encode_bitstream(gset, spec, meta)
        header = 4 + 2 + 8 + 2 + 4 * meta.n_stages + 1 + 9 * len(ATTRIBUTES)
        assert len(blob) == header + -(-33 * 88 // 8)

    def test_bad_magic_distinct_error(self):
        gset = GaussianSet.empty()
        meta = StreamMeta(16, 16, 1, RangeStrategy.GLOBAL, (0,))
        blob = bytearray(encode_bitstream(gset, default_global_spec(), meta))
        blob[:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            decode_bitstream(bytes(blob))

    def test_unsupported_version_distinct_error(self):
        gset = GaussianSet.empty()
        meta = StreamMeta(16, 16, 1, RangeStrategy.GLOBAL, (0,))
        blob = bytearray(encode_bitstream(gset, default_global_spec(), meta))
        blob[4:6] = (99).to_bytes(2, "little")
        with pytest.raises(UnsupportedVersionError):
            decode_bitstream(bytes(blob))

    def test_truncated_payload_distinct_error(self):
        gset = random_scene(named_rng(12, "bs-tr"), 10, 32, 32)
        blob = encode_bitstream(gset, default_global_spec(), stream_meta(gset, 32, 32))
        with pytest.raises(TruncatedStreamError):
            decode_bitstream(blob[:-4])
        with pytest.raises(TruncatedStreamError):
            decode_bitstream(blob[:10])

    def test_quantize_symbol_ranges(self):
        gset = random_scene(named_rng(13, "bs-sym"), 50, 64, 64)
        spec = default_global_spec()
        symbols = quantize(gset, spec, 64, 64)
        for name in ATTRIBUTES:
            assert symbols[name].max(initial=0) <= spec.attr(name).levels

    def test_dequantize_rebuilds_stage_ids(self):
        gset = random_scene(named_rng(14, "bs-st"), 9, 32, 32)
        gset.stage_id = np.array([1, 1, 1, 2, 2, 3, 3, 3, 3], dtype=np.int32)
        meta = StreamMeta(32, 32, 3, RangeStrategy.PER_IMAGE, (3, 2, 4))
        spec = derive_ranges(gset, RangeStrategy.PER_IMAGE, width=32, height=32)
        decoded, _, _ = decode_bitstream(encode_bitstream(gset, spec, meta))
        assert np.array_equal(decoded.stage_id, gset.stage_id)
