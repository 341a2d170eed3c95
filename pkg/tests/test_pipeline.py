"""Generation loop, evaluation metrics, and the ablation harness."""

import dataclasses

import numpy as np
import pytest

from duetgen import tensor as tz
from duetgen.codec import LatentStream, normalize_frames
from duetgen.config import TrainConfig
from duetgen.diffusion_head import DiffusionHead
from duetgen.model import Model
from duetgen.pipeline import (
    AblationRow,
    EvalSettings,
    GenerationError,
    GenerationRequest,
    MetricsReport,
    check_ordering,
    compute_aggregates,
    evaluate,
    generate,
    run_ablation,
    write_ablation_csv,
    write_report_csv,
    _normalized_mse,
)
from duetgen.trainer import eval_scripts, train


def small_config(**overrides):
    base = dict(
        width=32, heads=2, backbone_layers=2, encoder_layers=1, head_layers=1, head_width=32,
        train_scripts=10, tts_scripts=10, eval_scripts=4, batch_size=4, total_steps=6,
        min_patches=3, max_patches_data=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def model():
    m, _, _ = train(small_config())
    return m


@pytest.fixture(scope="module")
def script(model):
    return model.codec.sample_script(424242, 3, 4)


def test_t2av_generation_contract(model, script):
    res = generate(model, GenerationRequest(mode="t2av", script=script, max_patches=5, seed=3))
    p = model.config.patch
    assert res.audio.n_frames == res.n_patches * p
    assert res.video.n_frames == res.n_patches * p
    assert 1 <= res.n_patches <= 5
    assert len(res.stop_probs) == res.n_patches
    assert np.all(np.isfinite(res.audio.frames)) and np.all(np.isfinite(res.video.frames))


def test_a2v_locks_length_and_passes_audio_through(model, script):
    oracle_audio, _ = model.codec.render_streams(script)
    res = generate(model, GenerationRequest(mode="a2v", script=script, cond_stream=oracle_audio, seed=3))
    assert res.audio.n_frames == oracle_audio.n_frames
    assert np.array_equal(res.audio.frames, oracle_audio.frames)
    assert res.video.n_frames == oracle_audio.n_frames


def test_v2a_locks_length_and_passes_video_through(model, script):
    _, oracle_video = model.codec.render_streams(script)
    res = generate(model, GenerationRequest(mode="v2a", script=script, cond_stream=oracle_video, seed=3))
    assert np.array_equal(res.video.frames, oracle_video.frames)
    assert res.audio.n_frames == oracle_video.n_frames


def test_max_patches_cap(model, script):
    res = generate(model, GenerationRequest(mode="t2av", script=script, max_patches=1, seed=3))
    assert res.n_patches == 1
    assert res.audio.n_frames == model.config.patch


def test_generation_deterministic(model, script):
    req = GenerationRequest(mode="t2av", script=script, max_patches=4, seed=9)
    a = generate(model, req)
    b = generate(model, req)
    assert a.audio.frames.tobytes() == b.audio.frames.tobytes()
    assert a.video.frames.tobytes() == b.video.frames.tobytes()
    assert a.n_patches == b.n_patches


def test_closed_loop_consistency(model, script):
    """Re-encoding the emitted patches reproduces the hidden trace bit-exactly."""
    req = GenerationRequest(mode="t2av", script=script, max_patches=4, seed=5)
    res = generate(model, req)
    cache = model.backbone.new_cache()
    bb = model.backbone
    prefix = np.concatenate([bb.tag_t2av.data[None], bb.text_table.data[np.asarray(script.symbols)]])
    bb.incremental_forward(cache, prefix)
    with tz.no_grad():
        for i in range(res.n_patches):
            a = model.audio_encoder.encode_patch(res.norm_audio_patches[i]).data
            v = model.video_encoder.encode_patch(res.norm_video_patches[i]).data
            token = a + v
            assert np.array_equal(token, res.token_trace[i]), i
            h = bb.incremental_forward(cache, token)[-1]
            assert np.array_equal(h, res.hidden_trace[i]), i
    # and the denormalized output is the exact denormalization of those patches
    audio_n = normalize_frames(res.audio.frames, model.stats, "audio")
    assert np.abs(audio_n - np.concatenate(res.norm_audio_patches)).max() < 1e-5


def test_request_validation(model, script):
    oracle_audio, oracle_video = model.codec.render_streams(script)
    with pytest.raises(GenerationError, match="unknown mode"):
        generate(model, GenerationRequest(mode="tts", script=script))
    with pytest.raises(GenerationError, match="requires a conditioning"):
        generate(model, GenerationRequest(mode="a2v", script=script))
    with pytest.raises(GenerationError, match="needs a audio"):
        generate(model, GenerationRequest(mode="a2v", script=script, cond_stream=oracle_video))
    with pytest.raises(GenerationError, match="takes no conditioning"):
        generate(model, GenerationRequest(mode="t2av", script=script, cond_stream=oracle_audio))
    ragged = LatentStream(oracle_audio.frames[:-2], "audio")
    with pytest.raises(GenerationError, match="multiple"):
        generate(model, GenerationRequest(mode="a2v", script=script, cond_stream=ragged))


def test_fusion_mode_task_rejections(script):
    m_av, _, _ = train(small_config(fusion="interleave_av", total_steps=2))
    oracle_audio, oracle_video = m_av.codec.render_streams(script)
    with pytest.raises(GenerationError, match="cannot serve"):
        generate(m_av, GenerationRequest(mode="v2a", script=script, cond_stream=oracle_video))
    res = generate(m_av, GenerationRequest(mode="a2v", script=script, cond_stream=oracle_audio, seed=1))
    assert res.video.n_frames == oracle_audio.n_frames


def test_delay_mode_generation(script):
    m_delay, _, _ = train(small_config(fusion="delay_1", total_steps=2))
    res = generate(m_delay, GenerationRequest(mode="t2av", script=script, max_patches=4, seed=2))
    assert res.audio.n_frames == res.video.n_frames == res.n_patches * m_delay.config.patch
    oracle_audio, _ = m_delay.codec.render_streams(script)
    cond = generate(m_delay, GenerationRequest(mode="a2v", script=script, cond_stream=oracle_audio, seed=2))
    assert cond.video.n_frames == oracle_audio.n_frames


def test_untrained_model_generates_but_poorly(script):
    from duetgen.trainer import build_corpus, fit_corpus_stats

    config = small_config()
    m = Model(config)
    m.stats = fit_corpus_stats(m.codec, build_corpus(m.codec, config))
    oracle_audio, _ = m.codec.render_streams(script)
    res = generate(m, GenerationRequest(mode="a2v", script=script, cond_stream=oracle_audio, seed=0))
    _, oracle_video = m.codec.render_streams(script)
    mse = _normalized_mse(m, res.video, oracle_video)
    assert 0.3 < mse < 20.0  # pinned sanity band for an untrained sampler


# -- evaluation -----------------------------------------------------------------


def test_oracle_self_evaluation(model, script):
    oracle_audio, oracle_video = model.codec.render_streams(script)
    assert _normalized_mse(model, oracle_audio, oracle_audio) == 0.0
    assert _normalized_mse(model, oracle_video, oracle_video) == 0.0
    assert model.codec.sync_score(oracle_audio, oracle_video) >= 0.99


def test_evaluate_report_structure(model):
    scripts = eval_scripts(model.codec, model.config)
    report = evaluate(model, scripts, EvalSettings(task="t2av", max_patches=6, seed=1))
    assert report.task == "t2av"
    assert len(report.rows) == len(scripts)
    for row in report.rows:
        assert row.length_error == abs(row.n_generated - row.n_oracle)
        assert 0.0 <= row.sync_score <= 1.0
    recomputed = float(np.mean([r.audio_mse for r in report.rows]))
    assert abs(report.aggregates["audio_mse_mean"] - recomputed) < 1e-9
    recomputed_sync = float(np.mean([r.sync_score for r in report.rows]))
    assert abs(report.aggregates["sync_score_mean"] - recomputed_sync) < 1e-9


def test_evaluate_empty_corpus_rejected(model):
    from duetgen.codec import CodecError

    with pytest.raises(CodecError):
        evaluate(model, [], EvalSettings())


def test_report_csv_roundtrip(model, tmp_path):
    scripts = eval_scripts(model.codec, model.config)[:2]
    report = evaluate(model, scripts, EvalSettings(task="t2av", max_patches=6, seed=1))
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("script_seed,")
    assert len(lines) == 1 + len(report.rows)
    # repr round-trip: parse a float cell back exactly
    first_mse = float(lines[1].split(",")[4])
    assert first_mse == report.rows[0].audio_mse


# -- ablation harness ----------------------------------------------------------


def test_check_ordering_flags_violations():
    def row(fusion, task, sync):
        return AblationRow(fusion, task, "mean", "ok", sync, 0.1, 0.1, 0.0)

    good = [
        row("add", "t2av", 0.90), row("interleave_av", "t2av", 0.89),
        row("delay_1", "t2av", 0.80), row("delay_3", "t2av", 0.70),
        row("delay_1", "a2v", 0.82), row("delay_3", "a2v", 0.88),
    ]
    assert check_ordering(good) == []
    bad = [
        row("add", "t2av", 0.60), row("interleave_av", "t2av", 0.90),
        row("delay_1", "t2av", 0.80), row("delay_3", "t2av", 0.85),
        row("delay_1", "a2v", 0.90), row("delay_3", "a2v", 0.70),
    ]
    violations = check_ordering(bad)
    assert len(violations) == 3


def test_run_ablation_structure(tmp_path):
    config = small_config(total_steps=3, eval_scripts=2)
    result = run_ablation(["add", "delay_1"], config, n_seeds=1, settings=EvalSettings(max_patches=6))
    fusion_tasks = {(r.fusion, r.task, r.seed) for r in result.rows}
    assert ("add", "t2av", "0") in fusion_tasks
    assert ("add", "t2av", "mean") in fusion_tasks
    assert ("delay_1", "a2v", "0") in fusion_tasks  # delay modes also run audio-driven
    assert ("delay_1", "t2av", "mean") in fusion_tasks
    assert result.failed == []
    path = tmp_path / "ablation.csv"
    write_ablation_csv(result, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("fusion,")
    assert len(lines) >= 1 + len(result.rows)


def test_run_ablation_shares_corpus_across_modes():
    from duetgen.trainer import build_corpus

    config = small_config()
    codec_scripts = build_corpus(Model(config).codec, config)
    codec_scripts_delay = build_corpus(Model(dataclasses.replace(config, fusion="delay_1")).codec, config)
    assert [s.seed for s in codec_scripts.t2av] == [s.seed for s in codec_scripts_delay.t2av]
    assert [s.symbols for s in codec_scripts.t2av] == [s.symbols for s in codec_scripts_delay.t2av]


def test_run_ablation_needs_two_modes():
    with pytest.raises(ValueError):
        run_ablation(["add"], small_config(), n_seeds=1)


def test_run_ablation_flags_failures(monkeypatch, tmp_path):
    config = small_config(total_steps=2, eval_scripts=2)
    import duetgen.pipeline as pl

    calls = {"n": 0}
    from duetgen.trainer import train as real_train

    def flaky(cfg, out_dir=None, progress=False):
        calls["n"] += 1
        if cfg.fusion == "delay_1":
            raise RuntimeError("boom")
        return real_train(cfg, out_dir=out_dir, progress=progress)

    monkeypatch.setattr("duetgen.trainer.train", flaky)
    result = run_ablation(["add", "delay_1"], config, n_seeds=1, settings=EvalSettings(max_patches=6))
    assert any("delay_1" in f for f in result.failed)
    statuses = {(r.fusion, r.status) for r in result.rows}
    assert ("delay_1", "failed") in statuses
    assert ("add", "ok") in statuses
