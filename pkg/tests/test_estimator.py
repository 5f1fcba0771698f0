import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ptcpcfg.estimator import GrammarInducer
from ptcpcfg.matching import ClipFeatures, MatchConfig

X = [
    ["the", "dog", "sees", "a", "cat"],
    ["a", "cat", "eats"],
    ["dogs", "run"],
    ["the", "cat", "sees", "3", "dogs", "!"],
]
SMALL = dict(num_nonterminals=2, num_preterminals=3, symbol_dim=4, z_dim=2, hidden_dim=4, batch_size=2, epochs=2)


def test_get_params_and_clone():
    est = GrammarInducer(model="ptc", seed=3, **SMALL)
    params = est.get_params()
    assert params["model"] == "ptc" and params["seed"] == 3 and params["epochs"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "params_")
    est.set_params(epochs=5)
    assert est.epochs == 5


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        GrammarInducer().predict(X)


def test_fit_predict_cpcfg():
    est = GrammarInducer(**SMALL).fit(X)
    trees = est.predict(X + [["alone"]])
    assert trees[2] == "(X (X dogs) (X run))"
    assert trees[3].count("(X") == 2 * 5 - 1  # punctuation dropped, number kept as <num>
    assert "<num>" in trees[3]
    assert trees[-1] is None
    assert len(est.history_) == 2 * 2


def test_fit_is_deterministic():
    a = GrammarInducer(seed=4, **SMALL).fit(X)
    b = GrammarInducer(seed=4, **SMALL).fit(X)
    assert a.predict(X) == b.predict(X)
    for name, t in a.params_.items():
        assert np.array_equal(t.data, b.params_[name].data)


def test_score_perfect_on_gold_predictions():
    est = GrammarInducer(**SMALL).fit(X)
    gold = [t for t in est.predict(X)]
    assert est.score(X, gold) == 100.0
    with pytest.raises(ValueError):
        est.score(X, gold[:2])


def test_fit_ptc_and_mmc():
    rng = np.random.default_rng(0)
    match = MatchConfig(video_dim=3, word_dim=3, span_hidden=3, embed_dim=3, clips_to_sample=2)
    videos = [ClipFeatures(rng.normal(size=(3, 3))) for _ in X]
    est = GrammarInducer(model="ptc", match_config=match, **SMALL).fit(X, videos=videos)
    assert any(r["matching_loss"] > 0 for r in est.history_)

    experts = (("rgb", 3), ("audio", 2))
    mmc = MatchConfig(mode="mmc", word_dim=3, span_hidden=3, embed_dim=3, clips_to_sample=2, experts=experts)
    streams = [{"rgb": rng.normal(size=(4, 3)), "audio": rng.normal(size=(2, 2))} for _ in X]
    est = GrammarInducer(model="mmc", match_config=mmc, **SMALL).fit(X, videos=streams)
    assert len(est.predict(X)) == len(X)


def test_input_validation():
    with pytest.raises(TypeError):
        GrammarInducer(**SMALL).fit("not a list of sentences")
    with pytest.raises(TypeError):
        GrammarInducer(**SMALL).fit([["ok", "fine"], [1, 2]])
    with pytest.raises(ValueError):
        GrammarInducer(**SMALL).fit([])
    with pytest.raises(ValueError):
        GrammarInducer(model="ptc", **SMALL).fit(X, videos=[np.ones((2, 3))])
    with pytest.raises(ValueError):
        GrammarInducer(model="bogus", **SMALL).fit(X)
    with pytest.raises(ValueError):
        GrammarInducer(vocab_size=0, **SMALL).fit(X)


def test_from_params_checks_vocabulary():
    est = GrammarInducer(**SMALL).fit(X)
    again = GrammarInducer.from_params(est.params_, est.vocabulary_)
    assert again.predict(X) == est.predict(X)
    from ptcpcfg.data import Vocabulary

    with pytest.raises(ValueError):
        GrammarInducer.from_params(est.params_, Vocabulary(["<unk>", "<num>"]))
