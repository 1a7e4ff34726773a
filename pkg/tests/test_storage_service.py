"""
Tests for record files and checkpoints
"""
import numpy as np
import pytest
import torch

from app.config import RunConfig
from app.errors import ParseError, StorageError
from app.models.planning import SweepRow
from app.services.sft_service import make_optimizer
from app.services.storage_service import StorageService


@pytest.fixture
def storage():
    return StorageService()


def test_records_round_trip(storage, tmp_path):
    header = storage.header("sweep", RunConfig(), checkpoint_hash="abc", param="n_goals")
    rows = [SweepRow(param="n_goals", value=v, reward_mean=50.0, reward_pre_edit_mean=48.0, dac_mean=1.0, n_scenes=3)
            for v in (1, 2)]
    path = storage.write_records(tmp_path / "out" / "sweep.jsonl", header, rows + [{"values": np.arange(3)}])
    read_header, records = storage.read_records(path, kind="sweep")
    assert read_header == header
    assert read_header["run_config_hash"] == storage.header("x", RunConfig())["run_config_hash"]
    assert [r["value"] for r in records[:2]] == [1.0, 2.0]
    assert records[2] == {"values": [0, 1, 2]}


def test_malformed_line_reports_its_number(storage, tmp_path):
    path = tmp_path / "broken.jsonl"
    storage.write_records(path, storage.header("eval"), [{"a": 1}, {"a": 2}])
    lines = path.read_text().splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        storage.read_records(path)
    assert info.value.line_number == 3
    assert str(info.value).startswith("line 3:")


def test_header_is_required(storage, tmp_path):
    path = tmp_path / "plain.jsonl"
    path.write_text('{"a": 1}\n')
    with pytest.raises(ParseError) as info:
        storage.read_records(path)
    assert info.value.line_number == 1

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ParseError):
        storage.read_records(empty)


def test_kind_mismatch(storage, tmp_path):
    path = storage.write_records(tmp_path / "chain.jsonl", storage.header("chain"), [])
    with pytest.raises(ParseError):
        storage.read_records(path, kind="eval")


def test_missing_file_is_a_storage_error(storage, tmp_path):
    with pytest.raises(StorageError):
        storage.read_records(tmp_path / "absent.jsonl")
    with pytest.raises(StorageError):
        storage.load_checkpoint(tmp_path / "absent.pt")


def test_corpus_round_trip(storage, tmp_path, tiny_scenes):
    path = storage.save_corpus(tmp_path / "corpus.jsonl", tiny_scenes[:3], storage.header("corpus", seed=0))
    header, scenes = storage.load_corpus(path)
    assert header["seed"] == 0
    assert [s.seed for s in scenes] == [s.seed for s in tiny_scenes[:3]]
    assert np.array_equal(scenes[1].grid.drivable, tiny_scenes[1].grid.drivable)


def test_bad_corpus_record_reports_its_line(storage, tmp_path, tiny_scenes):
    path = storage.save_corpus(tmp_path / "corpus.jsonl", tiny_scenes[:2], storage.header("corpus"))
    lines = path.read_text().splitlines()
    lines[2] = '{"schema_version": 1}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        storage.load_corpus(path)
    assert info.value.line_number == 3


def test_checkpoint_round_trip(storage, tmp_path, random_model, scene):
    from app.services.denoiser_service import build_prompt
    from app.services.codec_service import masked_block

    optimizer = make_optimizer(random_model, 1e-3, 0.0)
    random_model.bump_version()
    digest = storage.save_checkpoint(tmp_path / "ckpt" / "model.pt", random_model, optimizer, step=7, run_config=RunConfig())
    loaded = storage.load_checkpoint(tmp_path / "ckpt" / "model.pt")
    assert loaded.checkpoint_hash == digest
    assert loaded.step == 7
    assert loaded.model.params_version == 1
    assert loaded.run_config == RunConfig().model_dump(mode="json")
    assert loaded.optimizer_state is not None

    prompt = build_prompt(scene, torch.float64)
    tokens = torch.from_numpy(masked_block(random_model.vocab, (3, 20))).unsqueeze(0)
    assert torch.equal(loaded.model(prompt, tokens).action_logits, random_model(prompt, tokens).action_logits)


def test_unknown_checkpoint_format(storage, tmp_path):
    path = tmp_path / "odd.pt"
    torch.save({"format_version": 99}, path)
    with pytest.raises(StorageError):
        storage.load_checkpoint(path)
