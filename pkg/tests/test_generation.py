import json
import math

import numpy as np
import pytest

from grfsq.errors import InvalidInput, PredictorContractViolation
from grfsq.fsq import LevelSpec
from grfsq.generation import (
    BigramPredictor,
    ControlTrack,
    EchoPredictor,
    RecordingPredictor,
    SpeechTokenSeq,
    UniformPredictor,
    argmax_sample,
    assemble_context,
    build_schedule,
    generate,
    load_controls,
    load_speech_tokens,
    nll,
)
from grfsq.quantizer import GrfsqConfig, quantize_sequence


def make_inputs(T, vocab=16, seed=50, num_groups=3):
    rng = np.random.default_rng(seed)
    speech = SpeechTokenSeq(tokens=rng.integers(0, vocab, T), vocab=vocab)
    controls = ControlTrack(
        head_pose=rng.normal(size=(T, 3)),
        gaze=rng.normal(size=(T, 2)),
        blink=rng.uniform(0, 1, size=(T, 2)),
    )
    return speech, controls


class TestSchedule:
    def test_four_by_four(self):
        schedule = build_schedule(4, 4)
        assert schedule.num_layers == 4
        assert len(schedule.passes) == 4
        for r, layer_pass in enumerate(schedule.passes):
            assert layer_pass.layer == r
            assert layer_pass.positions.tolist() == [0, 1, 2, 3]

    def test_empty_sequence(self):
        schedule = build_schedule(0, 3)
        assert len(schedule.passes) == 3
        assert all(p.positions.size == 0 for p in schedule.passes)

    def test_single_pass(self):
        schedule = build_schedule(7, 1)
        assert len(schedule.passes) == 1
        assert schedule.passes[0].positions.tolist() == list(range(7))

    def test_invalid(self):
        with pytest.raises(InvalidInput):
            build_schedule(-1, 2)
        with pytest.raises(InvalidInput):
            build_schedule(3, 0)


class TestAssembleContext:
    def test_layer_zero_uses_sentinel(self):
        speech, controls = make_inputs(5)
        prev = np.full((5, 3), 9, dtype=np.int64)
        ctx = assemble_context(np.zeros(4), 0, speech, controls, prev_tokens=prev)
        assert np.all(ctx.prev_layer_tokens == 0)
        assert np.all(ctx.framewise[:, -3:] == 0.0)

    def test_later_layers_embed_tokens_verbatim(self):
        speech, controls = make_inputs(5)
        prev = np.arange(15).reshape(5, 3)
        ctx = assemble_context(np.zeros(4), 2, speech, controls, prev_tokens=prev)
        assert np.array_equal(ctx.prev_layer_tokens, prev)
        assert np.array_equal(ctx.framewise[:, -3:], prev.astype(float))

    def test_framewise_layout(self):
        speech, controls = make_inputs(4)
        ctx = assemble_context(np.zeros(2), 0, speech, controls, num_groups=3)
        assert ctx.framewise.shape == (4, 1 + 3 + 2 + 2 + 3)
        assert np.array_equal(ctx.framewise[:, 0], speech.tokens.astype(float))
        assert np.array_equal(ctx.framewise[:, 1:4], controls.head_pose)
        assert np.array_equal(ctx.framewise[:, 4:6], controls.gaze)
        assert np.array_equal(ctx.framewise[:, 6:8], controls.blink)

    def test_length_mismatch_rejected(self):
        speech, _ = make_inputs(5)
        _, controls = make_inputs(6)
        with pytest.raises(InvalidInput):
            assemble_context(np.zeros(2), 0, speech, controls, num_groups=3)

    def test_layer_above_zero_needs_tokens(self):
        speech, controls = make_inputs(5)
        with pytest.raises(InvalidInput):
            assemble_context(np.zeros(2), 1, speech, controls, num_groups=3)


class TestNll:
    def test_uniform_analytic(self):
        T, G, C = 10, 12, 625
        probs = np.full((T, G, C), 1.0 / C)
        targets = np.zeros((T, G), dtype=np.int64)
        assert abs(nll(probs, targets) - G * T * math.log(C)) < 1e-9

    def test_perfect_predictor_is_zero(self):
        probs = np.zeros((2, 3, 4))
        targets = np.array([[0, 1, 2], [3, 2, 1]])
        t_idx, g_idx = np.indices(targets.shape)
        probs[t_idx, g_idx, targets] = 1.0
        assert nll(probs, targets) == 0.0

    def test_direct_evaluation(self):
        probs = np.zeros((2, 1, 4))
        probs[0, 0] = [0.5, 0.3, 0.1, 0.1]
        probs[1, 0] = [0.25, 0.25, 0.25, 0.25]
        targets = np.array([[0], [1]])
        expected = -(math.log(0.5) + math.log(0.25))
        assert abs(nll(probs, targets) - expected) < 1e-12
        assert abs(expected - 2.0794415416798357) < 1e-12

    def test_floor_keeps_nll_finite(self):
        probs = np.zeros((1, 1, 2))
        probs[0, 0] = [1.0, 0.0]
        value = nll(probs, np.array([[1]]))
        assert math.isfinite(value)
        assert abs(value - (-math.log(1e-12))) < 1e-9

    def test_shape_mismatch(self):
        probs = np.full((2, 2, 3), 1 / 3)
        with pytest.raises(InvalidInput):
            nll(probs, np.zeros((2, 3), dtype=np.int64))


class TestArgmaxSample:
    def test_one_hot(self):
        probs = np.zeros((1, 2, 3))
        probs[0, 0, 2] = 1.0
        probs[0, 1, 1] = 1.0
        assert argmax_sample(probs).tolist() == [[2, 1]]

    def test_uniform_ties_to_lowest(self):
        probs = np.full((3, 2, 5), 0.2)
        assert np.all(argmax_sample(probs) == 0)

    def test_simple_max(self):
        probs = np.array([[[0.2, 0.5, 0.3]]])
        assert argmax_sample(probs).tolist() == [[1]]

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(51)
        probs = rng.dirichlet(np.ones(6), size=(4, 3))
        scaled = probs * 7.3
        scaled /= scaled.sum(axis=2, keepdims=True)
        assert np.array_equal(argmax_sample(probs), argmax_sample(scaled))

    def test_rejects_invalid_grid(self):
        with pytest.raises(InvalidInput):
            argmax_sample(np.full((1, 1, 3), 0.5))  # rows do not sum to 1


class TestGenerate:
    def test_echo_predictor_reproduces_target(self):
        T, G, R = 6, 3, 4
        rng = np.random.default_rng(52)
        target = rng.integers(0, 10, size=(T, G, R))
        speech, controls = make_inputs(T)
        predictor = EchoPredictor(target, num_classes=10)
        out, layer_nll = generate(
            predictor, np.zeros(2), speech, controls, num_layers=R, num_groups=G, with_nll=True
        )
        assert np.array_equal(out, target)
        assert np.all(layer_nll == 0.0)

    def test_predictor_called_once_per_layer_and_causally(self):
        T, G, R = 5, 3, 4
        rng = np.random.default_rng(53)
        target = rng.integers(0, 8, size=(T, G, R))
        speech, controls = make_inputs(T)
        recorder = RecordingPredictor(EchoPredictor(target, num_classes=8))
        out = generate(recorder, np.zeros(2), speech, controls, num_layers=R, num_groups=G)
        assert len(recorder.contexts) == R
        for r, ctx in enumerate(recorder.contexts):
            assert ctx.layer_indicator == r
            if r == 0:
                assert np.all(ctx.prev_layer_tokens == 0)
            else:
                # only the previous layer's tokens are visible
                assert np.array_equal(ctx.prev_layer_tokens, target[:, :, r - 1])
                assert np.array_equal(ctx.prev_layer_tokens, out[:, :, r - 1])

    def test_uniform_predictor_nll(self):
        T, G, R, C = 10, 12, 4, 625
        speech, controls = make_inputs(T)
        out, layer_nll = generate(
            UniformPredictor(C), np.zeros(2), speech, controls,
            num_layers=R, num_groups=G, with_nll=True,
        )
        assert np.all(out == 0)  # argmax tie-break
        expected = G * T * math.log(C)
        assert np.all(np.abs(layer_nll - expected) < 1e-9)

    def test_bad_grid_shape_raises_contract_violation(self):
        speech, controls = make_inputs(4)

        def bad_predictor(context):
            return np.full((4, 2, 5), 0.2)  # wrong group count

        with pytest.raises(PredictorContractViolation):
            generate(bad_predictor, np.zeros(2), speech, controls, num_layers=2, num_groups=3)

    def test_class_count_must_stay_constant(self):
        speech, controls = make_inputs(4)
        calls = {"n": 0}

        def shifty(context):
            calls["n"] += 1
            classes = 5 if calls["n"] == 1 else 6
            return np.full((4, 3, classes), 1.0 / classes)

        with pytest.raises(PredictorContractViolation):
            generate(shifty, np.zeros(2), speech, controls, num_layers=2, num_groups=3)


class TestBigramPredictor:
    def periodic_corpus(self, T=240, period=8):
        # periodic motion gives the count model real structure to learn
        t = np.arange(T)
        base = np.stack(
            [np.sin(2 * np.pi * ((t / period) + phase)) for phase in np.linspace(0, 0.9, 8)],
            axis=1,
        )
        return np.tile(base, (1, 1))

    def test_beats_uniform_on_held_out_half(self):
        cfg = GrfsqConfig(2, 2, LevelSpec((5, 5, 5, 5)), 4)
        frames = self.periodic_corpus()
        tokens, _, _ = quantize_sequence(frames, cfg)
        T = tokens.shape[0]
        vocab = 16
        rng = np.random.default_rng(54)
        speech_tokens = (np.arange(T) // 4) % vocab  # correlated with the period
        half = T // 2
        train_speech = SpeechTokenSeq(tokens=speech_tokens[:half].astype(np.int64), vocab=vocab)
        test_speech = SpeechTokenSeq(tokens=speech_tokens[half:].astype(np.int64), vocab=vocab)
        model = BigramPredictor.fit(tokens[:half], train_speech, num_classes=625)

        controls = ControlTrack(
            head_pose=np.zeros((T - half, 3)),
            gaze=np.zeros((T - half, 2)),
            blink=np.zeros((T - half, 2)),
        )
        total_model = 0.0
        total_uniform = 0.0
        prev = None
        for layer in range(2):
            ctx = assemble_context(
                np.zeros(2), layer, test_speech, controls, prev_tokens=prev, num_groups=2
            )
            grid = model(ctx)
            targets = tokens[half:, :, layer]
            total_model += nll(grid, targets)
            total_uniform += (T - half) * 2 * math.log(625)
            prev = targets
        assert total_model < total_uniform

    def test_unknown_symbols_fall_back_to_uniform(self):
        speech = SpeechTokenSeq(tokens=np.zeros(3, dtype=np.int64), vocab=4)
        controls = ControlTrack(
            head_pose=np.zeros((3, 3)), gaze=np.zeros((3, 2)), blink=np.zeros((3, 2))
        )
        model = BigramPredictor(num_classes=7, num_layers=1)
        ctx = assemble_context(np.zeros(1), 0, speech, controls, num_groups=2)
        grid = model(ctx)
        assert np.allclose(grid, 1.0 / 7)


class TestValidation:
    def test_speech_token_bounds(self):
        with pytest.raises(InvalidInput):
            SpeechTokenSeq(tokens=np.array([0, 5]), vocab=5)
        with pytest.raises(InvalidInput):
            SpeechTokenSeq(tokens=np.array([-1]), vocab=5)

    def test_control_track_shapes(self):
        with pytest.raises(InvalidInput):
            ControlTrack(head_pose=np.zeros((3, 2)), gaze=np.zeros((3, 2)), blink=np.zeros((3, 2)))
        with pytest.raises(InvalidInput):
            ControlTrack(head_pose=np.zeros((3, 3)), gaze=np.zeros((2, 2)), blink=np.zeros((3, 2)))


class TestFileLoaders:
    def test_speech_tokens_round_trip(self, tmp_path):
        path = tmp_path / "tokens.txt"
        path.write_text("3\n1\n\n2\n")
        seq = load_speech_tokens(path, vocab=4)
        assert seq.tokens.tolist() == [3, 1, 2]

    def test_speech_tokens_validated(self, tmp_path):
        path = tmp_path / "tokens.txt"
        path.write_text("3\n9\n")
        with pytest.raises(InvalidInput, match="tokens.txt:2"):
            load_speech_tokens(path, vocab=4)
        path.write_text("abc\n")
        with pytest.raises(InvalidInput):
            load_speech_tokens(path, vocab=4)

    def test_controls_round_trip(self, tmp_path):
        path = tmp_path / "controls.jsonl"
        rows = [
            {"h": [0.1, 0.2, 0.3], "g": [0.0, -0.1], "b": [0.5, 0.6]},
            {"h": [1.0, 1.1, 1.2], "g": [0.2, 0.3], "b": [0.7, 0.8]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        track = load_controls(path)
        assert track.num_frames == 2
        assert track.head_pose[1].tolist() == [1.0, 1.1, 1.2]
        assert track.blink[0].tolist() == [0.5, 0.6]

    def test_controls_validated(self, tmp_path):
        path = tmp_path / "controls.jsonl"
        path.write_text(json.dumps({"h": [1, 2], "g": [0, 0], "b": [0, 0]}) + "\n")
        with pytest.raises(InvalidInput, match="controls.jsonl:1"):
            load_controls(path)
        path.write_text("not json\n")
        with pytest.raises(InvalidInput):
            load_controls(path)
