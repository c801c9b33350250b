import json

import numpy as np
import pytest

from autoprep import cli
from autoprep.audio_io import read_wav, write_wav
from autoprep.backends import (
    BackendSet,
    CapabilityError,
    EnergyVAD,
    FixtureEmbedder,
    IdentityEnhancer,
    PassthroughExtractor,
    QualityScore,
    ScriptedScorer,
    ScriptedTranscriber,
    fixture_key,
)
from autoprep.core import AudioBuffer, PipelineConfig, StageToggles
from autoprep.diarize import window_chunks
from autoprep.pipeline import (
    ManifestRecord,
    compute_stats,
    extract_target,
    load_manifest,
    read_input_manifest,
    run_pipeline,
    transcribe_segments,
)
from helpers import make_segment

RATE = 16000

# recording -> (duration_s, speech spans, expected post-segmentation spans)
CORPUS_DESIGN = {
    "rec_a": (30.0, [(2.0, 10.0)], [(1.6, 10.4)]),
    "rec_b": (30.0, [(5.0, 9.0), (12.0, 20.0)], [(4.6, 9.4), (11.6, 20.4)]),
    "rec_c": (24.0, [(1.0, 4.0), (4.5, 8.0)], [(0.6, 8.4)]),
}
# speaker per expected segment, in manifest order
SEGMENT_SPEAKERS = {
    ("rec_a", 1.6): 0,
    ("rec_b", 4.6): 0,
    ("rec_b", 11.6): 1,
    ("rec_c", 0.6): 1,
}


def _speaker_axes(dim=16):
    axes = np.zeros((2, dim))
    axes[0, 0] = 1.0
    axes[1, 1] = 1.0
    return axes


def build_corpus(root, mixed_segment=False):
    """Write the synthetic corpus and return (manifest_path, backends)."""
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "input.jsonl"
    rows = []
    for rid, (duration, speech_spans, _) in CORPUS_DESIGN.items():
        samples = np.zeros(int(duration * RATE), dtype=np.float32)
        for a, b in speech_spans:
            samples[int(a * RATE) : int(b * RATE)] = 0.1
        write_wav(root / f"{rid}.wav", AudioBuffer(samples, RATE))
        rows.append({"recording_id": rid, "path": f"{rid}.wav"})
    manifest_path.write_text("".join(json.dumps(r) + "\n" for r in rows))

    axes = _speaker_axes()
    rng = np.random.default_rng(992)
    table = {}
    transcripts = {}
    for rid, (_dur, _speech, expected) in CORPUS_DESIGN.items():
        for start, end in expected:
            speaker = SEGMENT_SPEAKERS[(rid, start)]
            chunks = window_chunks(make_segment(rid, start, end), 1.5, 0.75)
            for index, chunk in enumerate(chunks):
                chunk_speaker = speaker
                if mixed_segment and (rid, start) == ("rec_b", 11.6):
                    chunk_speaker = index % 2
                vec = axes[chunk_speaker] + rng.standard_normal(16) * 0.03
                table[fixture_key(rid, chunk.start_s)] = vec / np.linalg.norm(vec)
            transcripts[fixture_key(rid, start)] = f"words for {rid} at {start}"

    backends = BackendSet(
        enhancer=IdentityEnhancer(),
        vad=EnergyVAD(frame_hop_s=0.01, rms_threshold=0.05),
        embedder=FixtureEmbedder(table=table),
        extractor=PassthroughExtractor(),
        scorer=ScriptedScorer(default=QualityScore(3.0, 4.0)),
        transcriber=ScriptedTranscriber(table=transcripts),
    )
    return manifest_path, backends


def expected_spans():
    return [
        (rid, start, end)
        for rid, (_d, _s, spans) in CORPUS_DESIGN.items()
        for start, end in spans
    ]


class TestFullPipeline:
    @pytest.fixture()
    def run_result(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        return run_pipeline(manifest, config, backends, tmp_path / "out")

    def test_expected_segments_and_two_speakers(self, run_result):
        records = run_result.manifest
        assert [(r.recording_id, r.start_s, r.end_s) for r in records] == expected_spans()
        labels = {r.segment_id: r.speaker_label for r in records}
        by_span = {(r.recording_id, r.start_s): r.speaker_label for r in records}
        assert len({r.speaker_label for r in records}) == 2
        assert by_span[("rec_a", 1.6)] == by_span[("rec_b", 4.6)]
        assert by_span[("rec_b", 11.6)] == by_span[("rec_c", 0.6)]
        assert by_span[("rec_a", 1.6)] != by_span[("rec_c", 0.6)]
        assert all(label.startswith("0.") for label in labels.values())
        assert run_result.stats.num_speakers == 2

    def test_annotations_attached(self, run_result):
        for record in run_result.manifest:
            assert record.cluster_similarity >= 0.5
            assert record.ovrl_score == 3.0
            assert record.pdnsmos_score == 4.0
            assert record.transcript.startswith("words for")
            assert record.stage_flags == (
                "enhance",
                "segment",
                "cluster",
                "tse",
                "filter",
                "asr",
                "persist",
            )

    def test_audio_persisted_and_playable(self, run_result):
        for record in run_result.manifest:
            path = run_result.out_dir / record.audio_path
            assert path.exists()
            audio = read_wav(path)
            assert audio.sample_rate == RATE
            expected_len = round((record.end_s - record.start_s) * RATE)
            assert len(audio.samples) == expected_len
            assert float(np.abs(audio.samples).max()) > 0.05  # speech, not silence

    def test_report_and_stats_written(self, run_result):
        out = run_result.out_dir
        report = json.loads((out / "filter_report.json").read_text())
        assert report["input_count"] == 4
        assert report["retained_count"] == 4
        stats = json.loads((out / "stats.json").read_text())
        assert stats["num_segments"] == 4
        assert stats["total_duration_h"] == pytest.approx(30.2 / 3600.0)
        assert stats["ovrl_mean"] == pytest.approx(3.0)
        retention = stats["per_stage_retention"]
        values = [retention[s] for s in ("segment", "cluster", "tse", "filter", "persist")]
        assert values == sorted(values, reverse=True)

    def test_unlabeled_manifest_empty_on_clean_corpus(self, run_result):
        assert run_result.unlabeled == []
        lines = (run_result.out_dir / "manifest.unlabeled.jsonl").read_text()
        assert lines == ""


def manifest_bytes(out_dir):
    return (out_dir / "manifest.jsonl").read_bytes()


class TestDeterminismAndResume:
    def test_three_runs_byte_identical(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        blobs = []
        for i in range(3):
            out = tmp_path / f"out{i}"
            run_pipeline(manifest, config, backends, out)
            blobs.append(manifest_bytes(out))
        assert blobs[0] == blobs[1] == blobs[2]

    def test_resume_after_deleting_half_the_checkpoints(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        out = tmp_path / "out"
        run_pipeline(manifest, config, backends, out)
        reference = manifest_bytes(out)

        checkpoints = sorted(p for p in (out / "work").rglob("*") if p.is_file())
        for victim in checkpoints[::2]:
            victim.unlink()
        run_pipeline(manifest, config, backends, out, resume=True)
        assert manifest_bytes(out) == reference

    def test_resume_with_no_checkpoints_missing_is_a_noop(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        out = tmp_path / "out"
        run_pipeline(manifest, config, backends, out)
        reference = manifest_bytes(out)
        run_pipeline(manifest, config, backends, out, resume=True)
        assert manifest_bytes(out) == reference

    def test_worker_count_does_not_change_output(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        out1, out4 = tmp_path / "w1", tmp_path / "w4"
        run_pipeline(manifest, config, backends, out1, workers=1)
        run_pipeline(manifest, config, backends, out4, workers=4)
        assert manifest_bytes(out1) == manifest_bytes(out4)

    def test_interrupt_mid_scoring_then_resume(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(rng_seed=7)
        clean_out = tmp_path / "clean"
        run_pipeline(manifest, config, backends, clean_out)
        reference = manifest_bytes(clean_out)

        class InterruptingScorer:
            supported_sample_rates = None

            def __init__(self, inner, explode_at):
                self.inner = inner
                self.calls = 0
                self.explode_at = explode_at

            def score(self, audio, *, recording_id, span):
                self.calls += 1
                if self.calls == self.explode_at:
                    raise KeyboardInterrupt
                return self.inner.score(audio, recording_id=recording_id, span=span)

        out = tmp_path / "out"
        flaky = BackendSet(**{**backends.__dict__})
        flaky.scorer = InterruptingScorer(backends.scorer, explode_at=3)
        with pytest.raises(KeyboardInterrupt):
            run_pipeline(manifest, config, flaky, out)
        # recover with the healthy backend set
        run_pipeline(manifest, config, backends, out, resume=True)
        assert manifest_bytes(out) == reference


class TestStageToggles:
    def test_identity_pipeline_mirrors_input_segmentation(self, tmp_path):
        root = tmp_path / "corpus"
        root.mkdir()
        samples = np.linspace(-0.5, 0.5, 10 * RATE).astype(np.float32)
        write_wav(root / "solo.wav", AudioBuffer(samples, RATE))
        manifest = root / "input.jsonl"
        manifest.write_text(
            json.dumps(
                {
                    "recording_id": "solo",
                    "path": "solo.wav",
                    "segments": [[0.5, 3.0], [4.0, 9.5]],
                }
            )
            + "\n"
        )
        config = PipelineConfig(
            stages=StageToggles(
                enhance=False, segment=False, cluster=False, tse=False, filter=False, asr=False
            )
        )
        result = run_pipeline(manifest, config, BackendSet(), tmp_path / "out")
        assert [(r.start_s, r.end_s) for r in result.manifest] == [(0.5, 3.0), (4.0, 9.5)]
        for record in result.manifest:
            assert record.speaker_label is None
            assert record.ovrl_score is None
            assert record.stage_flags == ("persist",)
            assert (result.out_dir / record.audio_path).exists()
        assert result.report is None

    def test_cluster_disabled_leaves_segments_unlabeled(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        config = PipelineConfig(
            stages=StageToggles(cluster=False, tse=False, filter=False, asr=False)
        )
        result = run_pipeline(manifest, config, backends, tmp_path / "out")
        assert [(r.recording_id, r.start_s, r.end_s) for r in result.manifest] == expected_spans()
        assert all(r.speaker_label is None for r in result.manifest)


class TestUnlabeledRouting:
    def test_mixed_segment_goes_to_side_manifest(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus", mixed_segment=True)
        config = PipelineConfig(rng_seed=7)
        result = run_pipeline(manifest, config, backends, tmp_path / "out")
        main_spans = {(r.recording_id, r.start_s) for r in result.manifest}
        assert ("rec_b", 11.6) not in main_spans
        assert len(result.manifest) == 3
        assert [(r.recording_id, r.start_s) for r in result.unlabeled] == [("rec_b", 11.6)]
        side = result.unlabeled[0]
        assert side.speaker_label is None
        assert side.ovrl_score == 3.0
        assert "tse" not in side.stage_flags
        assert result.report.dropped_by_rule["unlabeled"] == 1
        # side manifest persisted on disk too
        rows = [json.loads(l) for l in (result.out_dir / "manifest.unlabeled.jsonl").read_text().splitlines()]
        assert len(rows) == 1


class TestFailureHandling:
    def test_unreadable_recording_skipped(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        rows = [json.loads(l) for l in manifest.read_text().splitlines()]
        rows.append({"recording_id": "ghost", "path": "missing.wav"})
        manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
        result = run_pipeline(manifest, PipelineConfig(rng_seed=7), backends, tmp_path / "out")
        assert [s["recording_id"] for s in result.skipped_recordings] == ["ghost"]
        assert len(result.manifest) == 4

    def test_capability_mismatch_aborts(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        backends.embedder.supported_sample_rates = (8000,)
        with pytest.raises(CapabilityError):
            run_pipeline(manifest, PipelineConfig(), backends, tmp_path / "out")

    def test_tse_failure_drops_segment(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")

        class FailingExtractor:
            supported_sample_rates = None

            def extract(self, audio, enrollment):
                raise RuntimeError("no speech found")

        backends.extractor = FailingExtractor()
        result = run_pipeline(manifest, PipelineConfig(rng_seed=7), backends, tmp_path / "out")
        assert result.manifest == []
        assert result.report.input_count == 0

    def test_asr_failure_keeps_segment_with_null_transcript(self, tmp_path):
        manifest, backends = build_corpus(tmp_path / "corpus")
        backends.transcriber = ScriptedTranscriber(table={})  # every key missing
        result = run_pipeline(manifest, PipelineConfig(rng_seed=7), backends, tmp_path / "out")
        assert len(result.manifest) == 4
        assert all(r.transcript is None for r in result.manifest)
        assert all("asr" not in r.stage_flags for r in result.manifest)


class TestStandaloneOps:
    def test_extract_target_passthrough(self):
        audio = AudioBuffer(np.ones(1000, dtype=np.float32), RATE)
        out = extract_target(audio, np.ones(4), PassthroughExtractor())
        assert out is audio

    def test_extract_target_scaling_matches_whole_signal(self):
        class HalfExtractor:
            supported_sample_rates = None

            def extract(self, audio, enrollment):
                return AudioBuffer(audio.samples * np.float32(0.5), audio.sample_rate)

        audio = AudioBuffer(np.linspace(-1, 1, 1000).astype(np.float32), RATE)
        out = extract_target(audio, np.ones(4), HalfExtractor())
        assert np.array_equal(out.samples, audio.samples * np.float32(0.5))

    def test_extract_target_rejects_shape_change(self):
        class Truncator:
            supported_sample_rates = None

            def extract(self, audio, enrollment):
                return AudioBuffer(audio.samples[:-1], audio.sample_rate)

        audio = AudioBuffer(np.ones(100, dtype=np.float32), RATE)
        with pytest.raises(RuntimeError):
            extract_target(audio, np.ones(4), Truncator())

    def test_transcribe_segments_fixture_and_empty(self):
        segments = [make_segment("r", 0.0, 2.0), make_segment("r", 3.0, 5.0)]
        table = {fixture_key("r", 0.0): "hello", fixture_key("r", 3.0): ""}
        out, reasons = transcribe_segments(
            segments,
            ScriptedTranscriber(table=table),
            lambda s: AudioBuffer(np.zeros(16, dtype=np.float32), RATE),
        )
        assert out[0].transcript == "hello"
        assert out[1].transcript == ""  # empty transcript allowed, recorded as such
        assert reasons == [None, None]

    def test_transcribe_segments_error_keeps_segment(self):
        segments = [make_segment("r", 0.0, 2.0)]
        out, reasons = transcribe_segments(
            segments,
            ScriptedTranscriber(table={}),
            lambda s: AudioBuffer(np.zeros(16, dtype=np.float32), RATE),
        )
        assert out[0].transcript is None
        assert reasons[0].startswith("asr_error")


class TestComputeStats:
    def test_empty_manifest_is_all_zeros(self):
        stats = compute_stats([])
        assert stats.total_duration_h == 0.0
        assert stats.num_segments == 0
        assert stats.num_speakers == 0
        assert stats.ovrl_mean is None

    def _record(self, rid, seg, start, end, label=None, sim=None, ovrl=None):
        return ManifestRecord(
            recording_id=rid,
            segment_id=seg,
            start_s=start,
            end_s=end,
            speaker_label=label,
            cluster_similarity=sim,
            ovrl_score=ovrl,
            pdnsmos_score=None,
            transcript=None,
            audio_path=f"{rid}/{seg}.wav",
            stage_flags=("persist",),
        )

    def test_two_ten_second_segments_one_speaker(self):
        records = [
            self._record("a", "a-0", 0.0, 10.0, label="0.0", sim=0.9),
            self._record("a", "a-1", 20.0, 30.0, label="0.0", sim=0.8),
        ]
        stats = compute_stats(records)
        assert stats.total_duration_h == pytest.approx(20.0 / 3600.0)
        assert stats.num_speakers == 1

    def test_score_moments_population_std(self):
        records = [
            self._record("a", "a-0", 0.0, 1.0, ovrl=2.5),
            self._record("a", "a-1", 2.0, 3.0, ovrl=3.5),
        ]
        stats = compute_stats(records)
        assert stats.ovrl_mean == pytest.approx(3.0)
        assert stats.ovrl_std == pytest.approx(0.5)


class TestCli:
    def _setup(self, tmp_path, stages=None):
        root = tmp_path / "corpus"
        manifest, backends = build_corpus(root)
        emb_rows = []
        for key, vec in backends.embedder._vectors.items():
            emb_rows.append(
                {"recording_id": key[0], "start_s": key[1] / 1000.0, "vector": vec.tolist()}
            )
        (root / "embeddings.jsonl").write_text(
            "".join(json.dumps(r) + "\n" for r in emb_rows)
        )
        backend_spec = {
            "enhancer": {"kind": "identity"},
            "vad": {"kind": "energy", "frame_hop_s": 0.01, "rms_threshold": 0.05},
            "embedder": {"kind": "fixture", "path": "embeddings.jsonl"},
            "extractor": {"kind": "passthrough"},
            "scorer": {"kind": "scripted", "default": 3.0},
            "transcriber": {"kind": "scripted", "default": "w"},
        }
        (root / "backends.json").write_text(json.dumps(backend_spec))
        config = {"rng_seed": 7}
        if stages is not None:
            config["stages"] = stages
        (root / "config.json").write_text(json.dumps(config))
        return root

    def test_run_stats_export(self, tmp_path, capsys):
        root = self._setup(tmp_path)
        out = tmp_path / "out"
        rc = cli.main(
            [
                "run",
                "--config",
                str(root / "config.json"),
                "--input",
                str(root / "input.jsonl"),
                "--out",
                str(out),
                "--backends",
                str(root / "backends.json"),
                "--workers",
                "2",
            ]
        )
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["segments"] == 4
        assert summary["speakers"] == 2

        assert cli.main(["stats", str(out)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["num_segments"] == 4

        assert cli.main(["export-embeddings", str(out)]) == 0
        exported = json.loads(capsys.readouterr().out)
        assert len(exported["written"]) == 1
        tsv = (out / "embeddings" / "batch-0000.tsv").read_text().splitlines()
        assert len(tsv) == sum(1 for _ in open(root / "embeddings.jsonl"))
        assert all(len(line.split("\t")) == 3 for line in tsv)

    def test_stage_override_from_cli(self, tmp_path, capsys):
        root = self._setup(tmp_path)
        out = tmp_path / "out"
        rc = cli.main(
            [
                "run",
                "--input",
                str(root / "input.jsonl"),
                "--out",
                str(out),
                "--backends",
                str(root / "backends.json"),
                "--stages",
                "segment",
            ]
        )
        assert rc == 0
        records = load_manifest(out / "manifest.jsonl")
        assert len(records) == 4
        assert all(r.speaker_label is None for r in records)

    def test_error_exit_code_and_summary(self, tmp_path, capsys):
        rc = cli.main(
            ["run", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]
        )
        assert rc == 1
        err = json.loads(capsys.readouterr().err)
        assert "error" in err and "message" in err


def test_read_input_manifest_duplicate_id(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(
        json.dumps({"recording_id": "a", "path": "a.wav"})
        + "\n"
        + json.dumps({"recording_id": "a", "path": "b.wav"})
        + "\n"
    )
    with pytest.raises(ValueError, match="duplicate"):
        read_input_manifest(path)


def test_external_segments_clamped_to_duration(tmp_path):
    root = tmp_path / "c"
    root.mkdir()
    write_wav(root / "r.wav", AudioBuffer(np.ones(2 * RATE, dtype=np.float32), RATE))
    manifest = root / "input.jsonl"
    manifest.write_text(
        json.dumps({"recording_id": "r", "path": "r.wav", "segments": [[0.0, 5.0]]}) + "\n"
    )
    config = PipelineConfig(
        stages=StageToggles(
            enhance=False, segment=False, cluster=False, tse=False, filter=False, asr=False
        )
    )
    result = run_pipeline(manifest, config, BackendSet(), tmp_path / "out")
    assert [(r.start_s, r.end_s) for r in result.manifest] == [(0.0, 2.0)]
