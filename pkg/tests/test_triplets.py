import json

import numpy as np
import pytest

from trimae.adapters import AudioTextScorer, Captioner, HashAudioTextScorer, StubCaptioner
from trimae.data import FrameImage, Manifest, Spectrogram, TripletRecord
from trimae.triplets import (
    PipelineError,
    ScoredCaption,
    VideoSample,
    build_triplets,
    caption_frames,
    filter_top_k,
    random_subsample,
    select_best_caption,
)
from trimae.validation import ValidationError


class TimestampCaptioner(Captioner):
    """Caption is just the frame's timestamp."""

    def __init__(self):
        self.name = "timestamp"
        self.version = "1"

    def caption(self, frame):
        return f"frame at {frame.timestamp_s:g}"


class FailOnFrame(Captioner):
    def __init__(self, failing_timestamps):
        self.name = "flaky"
        self.version = "1"
        self.failing = set(failing_timestamps)

    def caption(self, frame):
        if frame.timestamp_s in self.failing:
            raise RuntimeError(f"cannot caption t={frame.timestamp_s}")
        return f"frame at {frame.timestamp_s:g}"


class FixedScorer(AudioTextScorer):
    def __init__(self, table):
        self.name = "fixed"
        self.version = "1"
        self.table = table

    def score(self, audio, text):
        return self.table[text]


def _frames(n):
    rng = np.random.default_rng(0)
    return [
        FrameImage(values=rng.random((4, 4, 3)), timestamp_s=float(t), sample_id="v")
        for t in range(n)
    ]


def _audio(sample_id="v", seed=0):
    return Spectrogram(values=np.random.default_rng(seed).standard_normal((8, 8)), sample_id=sample_id)


class TestCaptionFrames:
    def test_one_caption_per_frame(self):
        captions = caption_frames(_frames(10), TimestampCaptioner())
        assert len(captions) == 10

    def test_captions_carry_timestamps(self):
        captions = caption_frames(_frames(3), TimestampCaptioner())
        assert captions == [(0.0, "frame at 0"), (1.0, "frame at 1"), (2.0, "frame at 2")]

    def test_failed_frame_skipped(self, caplog):
        captions = caption_frames(_frames(5), FailOnFrame({2.0}))
        assert len(captions) == 4
        assert all(t != 2.0 for t, _ in captions)

    def test_zero_frames_rejected(self):
        with pytest.raises(ValidationError, match="at least one"):
            caption_frames([], TimestampCaptioner())

    def test_all_failures_is_video_error(self):
        with pytest.raises(PipelineError, match="all 2 frames"):
            caption_frames(_frames(2), FailOnFrame({0.0, 1.0}))

    def test_empty_captions_dropped(self):
        class SometimesEmpty(Captioner):
            name = "empty"
            version = "1"

            def caption(self, frame):
                return "" if frame.timestamp_s == 0.0 else "ok"

        captions = caption_frames(_frames(2), SometimesEmpty())
        assert captions == [(1.0, "ok")]


class TestSelectBestCaption:
    def test_argmax(self):
        candidates = [(0.0, "first"), (1.0, "second"), (2.0, "third")]
        scorer = FixedScorer({"first": 0.2, "second": 0.9, "third": 0.4})
        best = select_best_caption(_audio(), candidates, scorer)
        assert best == ScoredCaption("second", 1.0, 0.9)

    def test_single_candidate(self):
        best = select_best_caption(_audio(), [(3.0, "only")], FixedScorer({"only": -0.8}))
        assert best.caption == "only" and best.score == -0.8

    def test_tie_breaks_earliest_timestamp(self):
        candidates = [(3.0, "late"), (1.0, "early")]
        best = select_best_caption(_audio(), candidates, FixedScorer({"late": 0.7, "early": 0.7}))
        assert best.frame_timestamp_s == 1.0

    def test_tie_breaks_lexicographic_after_timestamp(self):
        candidates = [(1.0, "zebra"), (1.0, "apple")]
        best = select_best_caption(_audio(), candidates, FixedScorer({"zebra": 0.5, "apple": 0.5}))
        assert best.caption == "apple"

    def test_empty_candidates(self):
        with pytest.raises(ValidationError):
            select_best_caption(_audio(), [], FixedScorer({}))


def _videos(n, frames_per_video=3):
    rng = np.random.default_rng(1)
    videos = []
    for i in range(n):
        vid = f"vid{i:03d}"
        frames = tuple(
            FrameImage(values=rng.random((4, 4, 3)), timestamp_s=float(t), sample_id=vid)
            for t in range(frames_per_video)
        )
        audio = Spectrogram(values=rng.standard_normal((8, 8)), sample_id=vid)
        videos.append(VideoSample(video_id=vid, frames=frames, audio=audio, audio_ref=f"{vid}.npz", frame_ref=f"{vid}.npz"))
    return videos


class CountingCaptioner(StubCaptioner):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def caption(self, frame):
        self.calls += 1
        return super().caption(frame)


class TestBuildTriplets:
    def test_all_videos_succeed(self):
        manifest = build_triplets(_videos(3), StubCaptioner(), HashAudioTextScorer(), source_dataset="demo")
        assert len(manifest) == 3
        assert manifest.generator_version == "stub-1+stub-1"

    def test_failed_video_excluded_and_journaled(self, tmp_path):
        class FailSecondVideo(Captioner):
            name = "flaky"
            version = "1"

            def caption(self, frame):
                if frame.sample_id == "vid001":
                    raise RuntimeError("broken video")
                return f"frame at {frame.timestamp_s:g}"

        journal = tmp_path / "journal.jsonl"
        manifest = build_triplets(_videos(3), FailSecondVideo(), HashAudioTextScorer(), journal_path=journal)
        assert len(manifest) == 2
        entries = [json.loads(line) for line in journal.read_text().splitlines()]
        failed = [e for e in entries if e["status"] == "failed"]
        assert len(failed) == 1 and failed[0]["video_id"] == "vid001"

    def test_resume_skips_finished_work(self, tmp_path):
        journal = tmp_path / "journal.jsonl"
        videos = _videos(4)
        first = build_triplets(videos[:2], StubCaptioner(), HashAudioTextScorer(), journal_path=journal)
        assert len(first) == 2

        counting = CountingCaptioner()
        resumed = build_triplets(videos, counting, HashAudioTextScorer(), journal_path=journal)
        assert len(resumed) == 4
        assert counting.calls == 2 * len(videos[0].frames)  # only the two new videos

        # rerunning with everything journaled does no work and yields the same manifest
        idle = CountingCaptioner()
        again = build_triplets(videos, idle, HashAudioTextScorer(), journal_path=journal)
        assert idle.calls == 0
        assert again.records == resumed.records

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            build_triplets([], StubCaptioner(), HashAudioTextScorer())

    def test_duplicate_video_ids_rejected(self):
        videos = _videos(2)
        with pytest.raises(ValidationError, match="duplicate"):
            build_triplets([videos[0], videos[0]], StubCaptioner(), HashAudioTextScorer())

    def test_worker_pool_matches_serial_result(self):
        videos = _videos(6)
        serial = build_triplets(videos, StubCaptioner(), HashAudioTextScorer())
        parallel = build_triplets(videos, StubCaptioner(), HashAudioTextScorer(), workers=4)
        assert serial.records == parallel.records

    def test_never_emits_suboptimal_caption(self):
        videos = _videos(4)
        captioner = TimestampCaptioner()
        scorer = HashAudioTextScorer()
        manifest = build_triplets(videos, captioner, scorer)
        by_id = {v.video_id: v for v in videos}
        for record in manifest.records:
            video = by_id[record.video_id]
            best = max(scorer.score(video.audio, f"frame at {f.timestamp_s:g}") for f in video.frames)
            assert record.score == pytest.approx(best, abs=1e-6)


def _manifest_with_scores(scores, prefix="vid"):
    records = [
        TripletRecord(f"{prefix}{i:03d}", "a.npz", "a.npz", 0.0, f"caption {i}", s)
        for i, s in enumerate(scores)
    ]
    return Manifest.from_records(records, source_dataset="t")


class TestFilterTopK:
    def test_spec_enumeration(self):
        manifest = _manifest_with_scores([round(0.1 * i, 1) for i in range(1, 11)])
        kept = filter_top_k(manifest, 30.0)
        assert [r.score for r in kept.records] == [1.0, 0.9, 0.8]
        assert kept.filter_k_percent == 30.0
        assert kept.source_record_count == 10

    def test_k_100_keeps_everything(self):
        manifest = _manifest_with_scores([0.5, 0.2, 0.8])
        assert filter_top_k(manifest, 100.0).records == manifest.records

    def test_minimum_one_record(self):
        manifest = _manifest_with_scores([0.5, 0.6])
        assert len(filter_top_k(manifest, 10.0)) == 1

    def test_boundary_ties_resolved_by_video_id(self):
        manifest = _manifest_with_scores([0.7, 0.7, 0.7, 0.1])
        kept = filter_top_k(manifest, 50.0)
        assert [r.video_id for r in kept.records] == ["vid000", "vid001"]

    def test_invariant_to_input_order(self):
        rng = np.random.default_rng(0)
        scores = list(rng.uniform(-1, 1, size=8))
        base = _manifest_with_scores(scores)
        kept = filter_top_k(base, 40.0)
        for _ in range(5):
            # same records, shuffled before manifest construction
            records = list(base.records)
            rng.shuffle(records)
            again = filter_top_k(Manifest.from_records(records, source_dataset="t"), 40.0)
            assert again.records == kept.records

    def test_subset_and_boundary_score_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 20))
            scores = np.round(rng.uniform(-1, 1, size=n), 3)
            manifest = _manifest_with_scores(list(scores))
            k = float(rng.choice([10.0, 30.0, 50.0, 80.0]))
            kept = filter_top_k(manifest, k)
            assert set(kept.records) <= set(manifest.records)
            excluded = set(manifest.records) - set(kept.records)
            if excluded:
                # every kept record precedes every excluded one under the
                # canonical (score desc, video_id asc) ordering
                worst_kept = max((-r.score, r.video_id) for r in kept.records)
                best_excluded = min((-r.score, r.video_id) for r in excluded)
                assert worst_kept < best_excluded

    def test_composition_without_ties(self):
        scores = [0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
        manifest = _manifest_with_scores(scores)
        twice = filter_top_k(filter_top_k(manifest, 50.0), 40.0)
        once = filter_top_k(manifest, 20.0)
        assert twice.records == once.records

    def test_k_out_of_range(self):
        manifest = _manifest_with_scores([0.5])
        for bad in (0.0, -5.0, 101.0):
            with pytest.raises(ValidationError):
                filter_top_k(manifest, bad)


class TestRandomSubsample:
    def test_k_100_identity(self):
        manifest = _manifest_with_scores([0.5, 0.2, 0.8])
        for seed in (0, 1, 99):
            assert random_subsample(manifest, 100.0, seed).records == manifest.records

    def test_count(self):
        manifest = _manifest_with_scores(list(np.linspace(-0.9, 0.9, 10)))
        assert len(random_subsample(manifest, 30.0, seed=4)) == 3

    def test_seed_determinism(self):
        manifest = _manifest_with_scores(list(np.linspace(-0.9, 0.9, 12)))
        assert random_subsample(manifest, 50.0, 7).records == random_subsample(manifest, 50.0, 7).records
        different = [
            random_subsample(manifest, 50.0, s).records for s in range(6)
        ]
        assert len({tuple(r.video_id for r in recs) for recs in different}) > 1
