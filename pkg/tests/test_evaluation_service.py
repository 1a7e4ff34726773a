"""
Tests for evaluation, sweeps and plot-series extraction
"""
import pytest

from app.errors import ConfigurationError, ParseError
from app.services.evaluation_service import (
    build_series,
    evaluate_corpus,
    evaluate_scene,
    mean_reward,
    plot_data,
    sweep,
)
from app.services.storage_service import StorageService


@pytest.fixture
def storage():
    return StorageService()


def test_single_scene_report(random_model, scene, tiny_pipeline):
    report = evaluate_scene(scene, random_model, tiny_pipeline)
    assert report.mode == "single"
    assert report.oracle is None
    assert report.single == report.candidates[report.selected].reward
    assert report.single_pre_edit == report.candidates[report.selected].pre_edit_reward


def test_oracle_never_trails_the_single_plan(random_model, tiny_scenes, tiny_pipeline):
    for scene in tiny_scenes[:3]:
        report = evaluate_scene(scene, random_model, tiny_pipeline, best_of_draws=2)
        assert report.mode == "best_of_n"
        assert report.oracle.aggregate >= report.single.aggregate
        assert len(report.candidates) == 2 * len(report.goals)


def test_corpus_summary_averages_reports(random_model, tiny_scenes, tiny_pipeline):
    reports, summary = evaluate_corpus(tiny_scenes[:3], random_model, tiny_pipeline, best_of_draws=2)
    assert summary.n_scenes == 3
    assert summary.single.aggregate == pytest.approx(mean_reward(reports))
    assert summary.oracle.aggregate >= summary.single.aggregate
    assert summary.edit_gain == pytest.approx(summary.single.aggregate - summary.single_pre_edit.aggregate)
    with pytest.raises(ConfigurationError):
        evaluate_corpus([], random_model, tiny_pipeline)


def test_step_sweep(random_model, tiny_scenes, tiny_pipeline):
    rows = sweep(tiny_scenes[:2], random_model, tiny_pipeline, "edit_steps", [0, 2])
    assert [r.value for r in rows] == [0.0, 2.0]
    assert all(r.n_scenes == 2 and r.param == "edit_steps" for r in rows)
    # without edit rounds the plan is the draft
    assert rows[0].reward_mean == pytest.approx(rows[0].reward_pre_edit_mean)


def test_goal_sweep_reports_the_oracle(random_model, tiny_scenes, tiny_pipeline):
    rows = sweep(tiny_scenes[:2], random_model, tiny_pipeline, "n_goals", [1, 3], best_of_draws=1)
    assert len(rows) == 2
    assert rows[1].reward_mean >= rows[0].reward_mean


def test_unknown_sweep_parameter(random_model, tiny_scenes, tiny_pipeline):
    with pytest.raises(ConfigurationError):
        sweep(tiny_scenes[:1], random_model, tiny_pipeline, "temperature", [1.0])


def test_series_from_logs():
    sft = build_series({"kind": "sft_log"}, [{"step": i, "total": 1.0, "dlm": 1.0, "sap": 0.0, "field": 0.0, "goal": 0.0}
                                             for i in range(3)])
    assert len(sft["sft_loss"]) == 3
    rl = build_series({"kind": "rl_log"}, [{"epoch": 0, "reward_pre_edit": 40.0, "reward_post_edit": 45.0}])
    assert rl["autoedit_gain"][0]["gap"] == 5.0
    assert build_series({"kind": "corpus"}, [{}]) == {}


def test_plot_data_without_reports(storage, tmp_path):
    written = plot_data([], tmp_path / "series", storage)
    assert written == {}
    header, records = storage.read_records(tmp_path / "series" / "manifest.jsonl", kind="manifest")
    assert records == []


def test_plot_data_merges_reports(storage, tmp_path):
    sweep_path = storage.write_records(
        tmp_path / "sweep.jsonl",
        storage.header("sweep", "h1"),
        [{"param": "n_goals", "value": v, "reward_mean": 50.0 + v, "reward_pre_edit_mean": 49.0, "dac_mean": 1.0,
          "n_scenes": 4} for v in (1, 2, 3)],
    )
    corpus_path = storage.write_records(tmp_path / "corpus.jsonl", storage.header("corpus", "h1"), [])
    written = plot_data([sweep_path, corpus_path], tmp_path / "series", storage)
    assert list(written) == ["reward_vs_n_goals"]
    header, rows = storage.read_records(written["reward_vs_n_goals"], kind="series")
    assert header["run_config_hash"] == "h1"
    assert [r["x"] for r in rows] == [1, 2, 3]
    _, manifest = storage.read_records(tmp_path / "series" / "manifest.jsonl")
    assert manifest == [{"series": "reward_vs_n_goals", "path": str(written["reward_vs_n_goals"]), "rows": 3}]


def test_plot_data_reports_the_bad_line(storage, tmp_path):
    path = storage.write_records(
        tmp_path / "chain.jsonl",
        storage.header("chain"),
        [{"name": "baseline", "prefill_ms_mean": 1.0, "decode_ms_mean": 2.0, "reward_delta": 0.0}, {"name": "merged"}],
    )
    with pytest.raises(ParseError) as info:
        plot_data([path], tmp_path / "series", storage)
    assert info.value.line_number == 3
