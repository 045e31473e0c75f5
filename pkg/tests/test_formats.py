import json
import os

import numpy as np
import pytest

from conftest import make_instances, random_pool_params
from zomg.errors import SchemaValidationError
from zomg.formats import (
    ResultRecord,
    append_result,
    dump_json,
    load_instance,
    load_weights,
    read_results,
    result_record,
    save_instance,
    save_weights,
    write_loss_trace_csv,
    write_run_header,
    write_similarity_csv,
)
from zomg.metrics import SimilarityRow
from zomg.numerics import Rng
from zomg.smo import LossBreakdown, Segment, SmoConfig, optimize_masks
from zomg.synth import SynthSpec


@pytest.fixture
def instance():
    return make_instances(SynthSpec(d=5, k=2, L=9, min_seg_len=3), 1, base_seed=0)[0]


class TestInstanceRoundTrip:
    def test_json_frames(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        loaded = load_instance(path)
        assert loaded.id == instance.id
        assert loaded.text == instance.text
        np.testing.assert_array_equal(loaded.frames, instance.frames)
        assert loaded.gt_segments == instance.gt_segments
        for a, b in zip(loaded.queries, instance.queries):
            assert a.text == b.text
            np.testing.assert_array_equal(a.embedding, b.embedding)

    @pytest.mark.parametrize("encoding,width", [("bin32", 32), ("bin64", 64)])
    def test_binary_sidecar(self, tmp_path, instance, encoding, width):
        json_path = str(tmp_path / "a.json")
        bin_path = str(tmp_path / "b.json")
        save_instance(instance, json_path, frames_encoding="json")
        save_instance(instance, bin_path, frames_encoding=encoding)
        sidecar = str(tmp_path / ("b.json.frames.bin"))
        L, d = instance.frames.shape
        assert os.path.getsize(sidecar) == L * d * (width // 8)
        a = load_instance(json_path)
        b = load_instance(bin_path)
        tol = 0 if width == 64 else 1e-6
        np.testing.assert_allclose(b.frames, a.frames, atol=tol)
        if width == 64:
            assert b.frames.tobytes() == a.frames.tobytes()

    def test_gt_end_out_of_range_names_field(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        obj = json.load(open(path))
        obj["gt_segments"][0]["end"] = 99
        dump_json(obj, path)
        with pytest.raises(SchemaValidationError, match=r"/gt_segments/0/end"):
            load_instance(path)

    def test_nan_rejected(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        text = open(path).read().replace(
            f'"dim": {instance.frames.shape[1]}', '"dim": NaN', 1
        )
        open(path, "w").write(text)
        with pytest.raises(SchemaValidationError):
            load_instance(path)

    def test_embedding_dim_mismatch(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        obj = json.load(open(path))
        obj["queries"][0]["embedding"] = [1.0, 0.0]
        dump_json(obj, path)
        with pytest.raises(SchemaValidationError, match=r"/queries/0/embedding"):
            load_instance(path)

    def test_non_unit_query_rejected(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        obj = json.load(open(path))
        obj["queries"][0]["embedding"] = [2.0] * instance.frames.shape[1]
        dump_json(obj, path)
        with pytest.raises(SchemaValidationError, match="unit"):
            load_instance(path)

    def test_non_numeric_frames_rejected(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path)
        obj = json.load(open(path))
        obj["frames"][0][0] = "oops"
        dump_json(obj, path)
        with pytest.raises(SchemaValidationError):
            load_instance(path)

    def test_sidecar_size_mismatch(self, tmp_path, instance):
        path = str(tmp_path / "inst.json")
        save_instance(instance, path, frames_encoding="bin64")
        sidecar = str(tmp_path / "inst.json.frames.bin")
        with open(sidecar, "ab") as fh:
            fh.write(b"\x00" * 8)
        with pytest.raises(SchemaValidationError, match=r"/frames_bin/path"):
            load_instance(path)


class TestWeights:
    def test_round_trip(self, tmp_path):
        params = random_pool_params(Rng(1), 6)
        path = str(tmp_path / "w.json")
        save_weights(params, path, {"seed": 3, "steps": 10, "tau": 0.1})
        loaded, meta = load_weights(path)
        assert loaded.wk.tobytes() == params.wk.tobytes()
        assert loaded.wv.tobytes() == params.wv.tobytes()
        assert loaded.q.tobytes() == params.q.tobytes()
        assert meta["seed"] == 3

    def test_meta_keys_required(self, tmp_path):
        params = random_pool_params(Rng(2), 3)
        with pytest.raises(SchemaValidationError, match="tau"):
            save_weights(params, str(tmp_path / "w.json"), {"seed": 0, "steps": 1})

    def test_shape_validation(self, tmp_path):
        params = random_pool_params(Rng(3), 3)
        path = str(tmp_path / "w.json")
        save_weights(params, path, {"seed": 0, "steps": 1, "tau": 0.1})
        obj = json.load(open(path))
        obj["q"] = [1.0, 2.0]
        dump_json(obj, path)
        with pytest.raises(SchemaValidationError, match="/q"):
            load_weights(path)


class TestResults:
    def _record(self, idx=0):
        return ResultRecord(
            id=f"inst-{idx:04d}", k=2, L=6, param_count=12,
            labels=[0, 0, 0, 1, 1, 1],
            segments=[Segment(0, 0, 3, 0.8), Segment(1, 3, 6, 0.7)],
            fragments=[],
            final_loss=LossBreakdown(1.5, 1.0, 2.0, 0.004),
        )

    def test_append_and_read(self, tmp_path):
        path = str(tmp_path / "results.jsonl")
        with open(path, "w") as fh:
            write_run_header(fh, "ground", "0.1.0", {"seed": 0})
            append_result(fh, self._record(0))
            append_result(fh, self._record(1))
        header, records = read_results(path)
        assert header["command"] == "ground"
        assert header["version"] == "0.1.0"
        assert [r.id for r in records] == ["inst-0000", "inst-0001"]
        assert records[0].segments == self._record().segments
        assert records[0].final_loss == self._record().final_loss

    def test_whole_lines_only(self, tmp_path):
        path = str(tmp_path / "results.jsonl")
        with open(path, "w") as fh:
            append_result(fh, self._record())
        with open(path) as fh:
            content = fh.read()
        assert content.endswith("\n")
        assert content.count("\n") == 1

    def test_param_count_validated(self, tmp_path):
        path = str(tmp_path / "results.jsonl")
        with open(path, "w") as fh:
            obj = json.loads(json.dumps({
                "id": "x", "k": 2, "L": 6, "param_count": 13,
                "labels": [0] * 6, "segments": [], "fragments": [],
                "final_loss": {"total": 0, "contrastive": 0, "exclusivity": 0,
                               "smoothness": 0},
            }))
            fh.write(json.dumps(obj) + "\n")
        with pytest.raises(SchemaValidationError, match="param_count"):
            read_results(path)

    def test_record_from_grounding_result(self, small_world):
        instances, params, _ = small_world
        inst = instances[0]
        res = optimize_masks(params, inst.frames, [q.embedding for q in inst.queries],
                             SmoConfig(steps=5))
        rec = result_record(inst.id, res)
        assert rec.param_count == rec.k * rec.L == 3 * 60
        assert len(rec.labels) == rec.L
        assert rec.final_loss == res.loss_trace[-1]


class TestCsv:
    def test_loss_trace_header_and_rows(self, tmp_path):
        path = str(tmp_path / "trace.csv")
        trace = [LossBreakdown(1.0, 0.5, 2.0, 0.003), LossBreakdown(0.9, 0.4, 1.9, 0.002)]
        write_loss_trace_csv(path, trace)
        lines = open(path, newline="").read().splitlines()
        assert lines[0] == "step,total,contrastive,exclusivity,smoothness"
        assert lines[1].startswith("0,1.0,0.5,2.0,")
        assert len(lines) == 3

    def test_similarity_csv(self, tmp_path):
        path = str(tmp_path / "sim.csv")
        write_similarity_csv(path, [SimilarityRow("predicted", "a", 0, 0.93)])
        lines = open(path, newline="").read().splitlines()
        assert lines[0] == "method,instance_id,query_idx,similarity"
        assert lines[1] == "predicted,a,0,0.93"
