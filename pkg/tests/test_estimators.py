import numpy as np
import pytest
from sklearn.base import clone

from conftest import TOY_CONFIG
from trimae.estimators import AudioVisualClassifier, AudioVisualPretrainer
from trimae.synthetic import make_labeled_pairs, make_synthetic_triplets
from trimae.validation import ValidationError

TOY_SHAPES = dict(audio_shape=TOY_CONFIG["audio_shape"], frame_shape=TOY_CONFIG["frame_shape"])

PRETRAINER_KW = dict(
    d=16,
    d_t=8,
    encoder_depth=1,
    cross_depth=1,
    decoder_depth=1,
    heads=2,
    audio_shape=TOY_CONFIG["audio_shape"],
    frame_shape=TOY_CONFIG["frame_shape"],
    audio_patch=TOY_CONFIG["audio_patch"],
    visual_patch=TOY_CONFIG["visual_patch"],
    steps=5,
    batch_size=4,
)


class TestSklearnContract:
    def test_get_params_round_trip(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW)
        params = est.get_params()
        assert params["d"] == 16 and params["steps"] == 5
        est.set_params(steps=9)
        assert est.steps == 9

    def test_clone(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW, lambda2=0.05)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_classifier_params(self):
        est = AudioVisualClassifier(task="multilabel", steps=3)
        assert clone(est).get_params()["task"] == "multilabel"


class TestPretrainerEstimator:
    def test_fit_transform_shapes(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW)
        triplets = make_synthetic_triplets(6, seed=0, **TOY_SHAPES)
        out = est.fit(triplets).transform(triplets)
        assert out.shape == (6, 2 * est.d)
        halves = np.split(out, 2, axis=1)
        for half in halves:
            assert np.allclose(np.linalg.norm(half, axis=1), 1.0, atol=1e-5)

    def test_accepts_raw_tuples(self):
        triplets = make_synthetic_triplets(4, seed=1, **TOY_SHAPES)
        raw = [(t.audio.values, t.frame.values, t.caption, t.sample_id) for t in triplets]
        est = AudioVisualPretrainer(**PRETRAINER_KW).fit(raw)
        assert est.transform(raw).shape == (4, 32)

    def test_transform_before_fit_rejected(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW)
        with pytest.raises(ValidationError, match="fit"):
            est.transform(make_synthetic_triplets(3, seed=0, **TOY_SHAPES))

    def test_score_retrieval_keys(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW)
        triplets = make_synthetic_triplets(5, seed=2, **TOY_SHAPES)
        metrics = est.fit(triplets).score_retrieval(triplets, ks=(1, 5))
        assert set(metrics) == {"a2v", "v2a"}

    def test_av_only_mode_skips_text_encoder(self):
        est = AudioVisualPretrainer(**PRETRAINER_KW, include_text=False)
        est.fit(make_synthetic_triplets(4, seed=0, **TOY_SHAPES))
        assert est.text_encoder_ is None
        assert all(r.loss.a2t == 0.0 for r in est.log_)


class TestClassifierEstimator:
    def test_fit_predict_multiclass(self):
        pairs = make_labeled_pairs(8, 3, task="multiclass", seed=0, **TOY_SHAPES)
        y = np.asarray([p.label for p in pairs])
        clf = AudioVisualClassifier(task="multiclass", steps=25, batch_size=8, learning_rate=0.002)
        clf.pretrained = _tiny_backbone()
        predictions = clf.fit(pairs, y).predict(pairs)
        assert predictions.shape == (8,)
        assert clf.decision_function(pairs).shape == (8, 3)

    def test_fit_predict_multilabel(self):
        pairs = make_labeled_pairs(6, 4, task="multilabel", seed=1, **TOY_SHAPES)
        y = np.stack([np.asarray(p.label) for p in pairs])
        clf = AudioVisualClassifier(task="multilabel", steps=5, batch_size=6)
        clf.pretrained = _tiny_backbone()
        out = clf.fit(pairs, y).predict(pairs)
        assert out.shape == (6, 4)
        assert set(np.unique(out)) <= {0, 1}

    def test_reuses_fitted_pretrainer_backbone(self):
        triplets = make_synthetic_triplets(4, seed=3, **TOY_SHAPES)
        pre = AudioVisualPretrainer(**PRETRAINER_KW).fit(triplets)
        pairs = make_labeled_pairs(4, 2, task="multiclass", seed=2, **TOY_SHAPES)
        y = np.asarray([p.label for p in pairs])
        clf = AudioVisualClassifier(pretrained=pre, task="multiclass", steps=3, batch_size=4)
        clf.fit(pairs, y)
        assert clf.model_ is pre.model_


def _tiny_backbone():
    from trimae.model import ModelConfig, TriModalAutoencoder

    return TriModalAutoencoder(ModelConfig(**TOY_CONFIG))
