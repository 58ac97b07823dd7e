"""Stores, index build/search, inverted-index parity, and the CLI surface."""

from __future__ import annotations

import numpy as np
import pytest

from ausil import baselines, cli, retrieval
from ausil.audio import load_audio
from ausil.corpus import DatasetManifest
from ausil.errors import DataError, ModelError
from ausil.model import Model, build_model


def unit_rows(rng, n, dim):
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# -- binary stores ----------------------------------------------------------------


class TestFeatureStore:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [("a", rng.normal(size=(5, 7))), ("b", rng.normal(size=(3, 7)))]
        path = tmp_path / "features.bin"
        retrieval.write_feature_store(path, records, "f" * 64, "cnn", 0.5)
        meta, back = retrieval.read_feature_store(path)
        assert meta == {"model_sha256": "f" * 64, "variant": "cnn", "step_seconds": 0.5}
        assert sorted(back) == ["a", "b"]
        for cid, matrix in records:
            # stored as float32, read back widened
            assert back[cid].dtype == np.float64
            assert np.array_equal(back[cid], matrix.astype(np.float32).astype(np.float64))

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="not a feature store"):
            retrieval.read_feature_store(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "features.bin"
        retrieval.write_feature_store(path, [("a", np.ones((4, 6)))], "", "mac", 1.0)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(DataError, match="truncated"):
            retrieval.read_feature_store(path)

    def test_rejects_non_matrix(self, tmp_path):
        with pytest.raises(ValueError, match="not a matrix"):
            retrieval.write_feature_store(tmp_path / "x.bin", [("a", np.ones(4))], "", "mac", 1.0)


class TestFingerprintDb:
    def test_constellation_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        records = [
            ("q", baselines.ConstellationFingerprint(rng.integers(0, 2**18, size=(9, 2), dtype=np.uint32))),
            ("r", baselines.ConstellationFingerprint(rng.integers(0, 2**18, size=(4, 2), dtype=np.uint32))),
        ]
        path = tmp_path / "fp.bin"
        retrieval.write_fingerprint_db(path, "constellation", records)
        method, back, inverted = retrieval.read_fingerprint_db(path)
        assert method == "constellation"
        for cid, fp in records:
            assert np.array_equal(back[cid].entries, fp.entries)
        fresh = retrieval.make_inverted_index(records)
        assert np.array_equal(inverted.hashes, fresh.hashes)
        assert np.array_equal(inverted.starts, fresh.starts)
        assert np.array_equal(inverted.clips, fresh.clips)
        assert np.array_equal(inverted.times, fresh.times)
        assert inverted.clip_ids == ["q", "r"]

    def test_slides_and_tiles_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        slides = [("s", baselines.SlidesFingerprint(rng.integers(0, 9, size=(5, 32), dtype=np.int32)))]
        tiles = [
            (
                "t",
                baselines.TilesFingerprint(
                    rng.integers(-1, 40, size=(5, 6), dtype=np.int32),
                    rng.integers(0, 7, size=5, dtype=np.int32),
                ),
            )
        ]
        retrieval.write_fingerprint_db(tmp_path / "s.bin", "slides", slides)
        retrieval.write_fingerprint_db(tmp_path / "t.bin", "tiles", tiles)
        method, back, inverted = retrieval.read_fingerprint_db(tmp_path / "s.bin")
        assert (method, inverted) == ("slides", None)
        assert np.array_equal(back["s"].profiles, slides[0][1].profiles)
        method, back, inverted = retrieval.read_fingerprint_db(tmp_path / "t.bin")
        assert (method, inverted) == ("tiles", None)
        assert np.array_equal(back["t"].positions, tiles[0][1].positions)
        assert np.array_equal(back["t"].occupancy, tiles[0][1].occupancy)

    def test_write_unknown_method(self, tmp_path):
        with pytest.raises(ValueError, match="unknown fingerprint method"):
            retrieval.write_fingerprint_db(tmp_path / "x.bin", "wavelets", [("a", None)])

    def test_read_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(DataError, match="not a fingerprint database"):
            retrieval.read_fingerprint_db(path)


# -- inverted index ----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_fingerprints(small_corpus):
    candidates = retrieval.extract_fingerprints(small_corpus, small_corpus.searchable(), "constellation")
    queries = retrieval.extract_fingerprints(small_corpus, small_corpus.queries(), "constellation")
    return candidates, queries


class TestInvertedIndex:
    def test_scores_match_pairwise_matching(self, small_fingerprints):
        candidates, queries = small_fingerprints
        inverted = retrieval.make_inverted_index(sorted(candidates.items()))
        for query_fp in queries.values():
            fast = retrieval.constellation_scores(query_fp, inverted)
            assert set(fast) == set(candidates)
            for cid, fp in candidates.items():
                assert fast[cid] == baselines.constellation_match(query_fp, fp)

    def test_empty_index_is_valid(self, small_fingerprints, tmp_path):
        _, queries = small_fingerprints
        inverted = retrieval.make_inverted_index([])
        assert inverted.hashes.shape == (0,)
        query_fp = next(iter(queries.values()))
        assert retrieval.constellation_scores(query_fp, inverted) == {}
        path = tmp_path / "empty.bin"
        retrieval.write_fingerprint_db(path, "constellation", [])
        method, records, back = retrieval.read_fingerprint_db(path)
        assert (method, records) == ("constellation", {})
        assert back.hashes.shape == (0,)

    def test_query_without_matches_scores_zero(self, small_fingerprints):
        candidates, _ = small_fingerprints
        inverted = retrieval.make_inverted_index(sorted(candidates.items()))
        alien = baselines.ConstellationFingerprint(
            np.full((3, 2), 2**19 - 1, dtype=np.uint32)
        )
        scores = retrieval.constellation_scores(alien, inverted)
        assert all(v == 0.0 for v in scores.values())


# -- index directories and search ----------------------------------------------------


@pytest.fixture(scope="module")
def constellation_index(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("idx_constellation")
    info = retrieval.build_index(small_corpus, "constellation", out)
    return out, info


@pytest.fixture(scope="module")
def ausil_index(small_corpus, small_model, session_tmp, tmp_path_factory):
    out = tmp_path_factory.mktemp("idx_ausil")
    model = Model.load(session_tmp / "small_model.bin")
    info = retrieval.build_index(small_corpus, "ausil", out, model=model, variant="mac")
    return out, info, model


class TestBuildIndex:
    def test_learned_method_requires_model(self, small_corpus, tmp_path):
        with pytest.raises(ModelError, match="requires a model"):
            retrieval.build_index(small_corpus, "ausil", tmp_path / "idx")

    def test_unknown_method(self, small_corpus, tmp_path):
        with pytest.raises(ValueError, match="unknown method"):
            retrieval.build_index(small_corpus, "shingles", tmp_path / "idx")

    def test_missing_index_dir(self, tmp_path):
        with pytest.raises(DataError, match="no index"):
            retrieval.load_index_info(tmp_path / "nowhere")

    def test_info_round_trip(self, constellation_index, small_corpus):
        out, info = constellation_index
        assert retrieval.load_index_info(out) == info
        assert info.count == len(small_corpus.searchable())


class TestSearch:
    def test_indexed_clip_retrieves_itself(self, constellation_index, small_corpus):
        out, _ = constellation_index
        cid = sorted(small_corpus.searchable())[0]
        ranked = retrieval.search(out, load_audio(small_corpus.path(cid)))
        assert ranked[0][0] == cid
        assert ranked[0][1] == 1.0

    def test_top_k_clamps_to_corpus(self, constellation_index, small_corpus):
        out, _ = constellation_index
        query = load_audio(small_corpus.path(small_corpus.queries()[0]))
        assert len(retrieval.search(out, query, top_k=3)) == 3
        assert len(retrieval.search(out, query, top_k=10_000)) == len(small_corpus.searchable())

    def test_learned_index_self_retrieval(self, ausil_index, small_corpus):
        out, _, model = ausil_index
        cid = sorted(small_corpus.searchable())[0]
        ranked = retrieval.search(out, load_audio(small_corpus.path(cid)), model=model)
        assert ranked[0][0] == cid
        assert ranked[0][1] > 0.999

    def test_learned_index_needs_model(self, ausil_index, small_corpus):
        out, _, _ = ausil_index
        query = load_audio(small_corpus.path(small_corpus.queries()[0]))
        with pytest.raises(ModelError, match="requires the model"):
            retrieval.search(out, query)

    def test_stale_model_is_refused(self, ausil_index, small_corpus, backbone_tensors, tmp_path):
        out, _, model = ausil_index
        other = build_model(backbone_tensors, model.pca, seed=99)
        other.save(tmp_path / "other.bin")
        other = Model.load(tmp_path / "other.bin")
        query = load_audio(small_corpus.path(small_corpus.queries()[0]))
        with pytest.raises(ModelError, match="rebuild the index"):
            retrieval.search(out, query, model=other)


class TestEvaluateMethod:
    def test_skips_unannotated_queries(self, small_fingerprints):
        candidates, queries = small_fingerprints
        manifest = DatasetManifest(clips=[], positives={})
        # build a manifest view with one annotated and one bare query
        from ausil.corpus import ClipEntry

        qids = sorted(queries)
        clips = [ClipEntry(clip_id=cid, path=f"{cid}.wav", role="reference") for cid in sorted(candidates)]
        clips += [ClipEntry(clip_id=q, path=f"{q}.wav", role="query") for q in qids[:2]]
        relevant = sorted(candidates)[0]
        manifest = DatasetManifest(clips=clips, positives={qids[0]: (relevant,)})
        report, rankings = retrieval.evaluate_method(
            manifest,
            "constellation",
            query_reps={q: queries[q] for q in qids[:2]},
            candidate_reps=candidates,
        )
        assert report.skipped == [qids[1]]
        assert len(report.per_query) == 1 and len(rankings) == 1
        assert rankings[0][1] == {relevant}

    def test_rejects_unknown_method(self, small_corpus):
        with pytest.raises(ValueError, match="unknown method"):
            retrieval.evaluate_method(small_corpus, "shazam")


class TestWorkerPool:
    def test_order_preserved(self, monkeypatch):
        monkeypatch.setenv(retrieval.WORKERS_ENV, "4")
        assert retrieval.worker_count() == 4
        items = list(range(40))
        assert retrieval.map_ordered(lambda x: x * x, items) == [x * x for x in items]

    def test_bad_env_falls_back_to_serial(self, monkeypatch):
        monkeypatch.setenv(retrieval.WORKERS_ENV, "lots")
        assert retrieval.worker_count() == 1


# -- command-line interface ------------------------------------------------------------


class TestCli:
    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth"])  # missing --out
        assert exc.value.code == 2

    def test_synth_and_fingerprint(self, tmp_path, capsys):
        out = tmp_path / "corpus"
        rc = cli.main(
            [
                "synth", "--out", str(out), "--seed", "3",
                "--references", "2", "--queries", "1", "--duplicates", "1",
                "--distractors", "1", "--transforms", "gain",
            ]
        )
        assert rc == 0
        assert (out / "manifest.jsonl").exists()
        lines = dict(
            line.split("\t") for line in capsys.readouterr().out.strip().splitlines()
        )
        assert lines["clips"] == "5" and lines["queries"] == "1"

        wav = next(out.rglob("*.wav"))
        assert cli.main(["fingerprint", "--audio", str(wav), "--method", "slides"]) == 0
        assert capsys.readouterr().out.startswith("windows\t")

    def test_index_search_evaluate(self, small_corpus, tmp_path, capsys):
        manifest = str(small_corpus.root / "manifest.jsonl")
        idx = tmp_path / "idx"
        assert cli.main(["index", "--manifest", manifest, "--method", "constellation", "--out", str(idx)]) == 0
        capsys.readouterr()

        cid = sorted(small_corpus.searchable())[0]
        wav = str(small_corpus.path(cid))
        assert cli.main(["search", "--index", str(idx), "--query", wav, "--top-k", "4"]) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert len(rows) == 4
        assert rows[0] == f"{cid}\t1.000000"

        report = tmp_path / "report.txt"
        pr = tmp_path / "pr.txt"
        rc = cli.main(
            [
                "evaluate", "--manifest", manifest, "--method", "constellation",
                "--out", str(report), "--pr", str(pr),
            ]
        )
        assert rc == 0
        assert capsys.readouterr().out.startswith("mAP\t")
        assert report.exists() and pr.exists()

    def test_missing_index_exits_3(self, small_corpus, tmp_path, capsys):
        wav = str(small_corpus.path(small_corpus.queries()[0]))
        rc = cli.main(["search", "--index", str(tmp_path / "void"), "--query", wav])
        assert rc == 3
        assert "no index" in capsys.readouterr().err

    def test_corrupt_store_exits_3(self, small_corpus, tmp_path, capsys):
        idx = tmp_path / "idx"
        retrieval.build_index(small_corpus, "constellation", idx)
        (idx / "fingerprints.bin").write_bytes(b"garbage")
        wav = str(small_corpus.path(small_corpus.queries()[0]))
        assert cli.main(["search", "--index", str(idx), "--query", wav]) == 3

    def test_learned_search_without_model_exits_4(self, ausil_index, small_corpus, capsys):
        out, _, _ = ausil_index
        wav = str(small_corpus.path(small_corpus.queries()[0]))
        rc = cli.main(["search", "--index", str(out), "--query", wav])
        assert rc == 4
        assert "requires the model" in capsys.readouterr().err
