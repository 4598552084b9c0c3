import numpy as np
import pytest

from pcmoe.data import BatchStream, DatasetSpec, class_mixture, home_classes, pooled, synth_dataset
from pcmoe.model import ConfigError


def _freqs(d, c):
    return np.bincount(d.labels, minlength=c) / len(d)


def test_iid_split_has_equal_class_frequencies():
    spec = DatasetSpec(examples_per_party=4000, n_classes=4, skew=0.0)
    parties, _ = synth_dataset(spec, 4, 0)
    for d in parties:
        # 4-sigma binomial band around 1/4
        assert np.all(np.abs(_freqs(d, 4) - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 4000))


def test_full_skew_gives_one_class_per_party():
    spec = DatasetSpec(examples_per_party=200, n_classes=4, skew=1.0)
    parties, test = synth_dataset(spec, 4, 0)
    for i, d in enumerate(parties):
        assert set(d.labels.tolist()) == {i}
    assert set(test.labels.tolist()) == {0, 1, 2, 3}


def test_home_classes_and_mixture():
    assert home_classes(1, 2, 4) == [1, 3]
    assert home_classes(5, 8, 4) == [1]
    mix = class_mixture(0, 2, DatasetSpec(n_classes=4, skew=0.8))
    assert mix == pytest.approx([0.05 + 0.4, 0.05, 0.05 + 0.4, 0.05])


def test_determinism_and_seed_sensitivity():
    spec = DatasetSpec()
    a, ta = synth_dataset(spec, 4, 11)
    b, tb = synth_dataset(spec, 4, 11)
    c, _ = synth_dataset(spec, 4, 12)
    assert all(x.tokens.tobytes() == y.tokens.tobytes() and x.labels.tobytes() == y.labels.tobytes() for x, y in zip(a, b))
    assert ta.tokens.tobytes() == tb.tokens.tobytes()
    assert a[0].tokens.tobytes() != c[0].tokens.tobytes()


def test_token_range_and_shapes():
    spec = DatasetSpec(examples_per_party=10, vocab=20, seq_len=5)
    parties, test = synth_dataset(spec, 2, 0)
    assert parties[0].tokens.shape == (10, 5) and test.tokens.shape == (spec.test_size, 5)
    assert parties[0].tokens.min() >= 0 and parties[0].tokens.max() < 20
    assert len(pooled(parties)) == 20


@pytest.mark.parametrize(
    "spec",
    [DatasetSpec(n_classes=1), DatasetSpec(vocab=2, n_classes=4), DatasetSpec(skew=1.5), DatasetSpec(examples_per_party=0)],
)
def test_degenerate_specs(spec):
    with pytest.raises(ConfigError):
        synth_dataset(spec, 2, 0)


def test_batch_stream_covers_each_pass():
    parties, _ = synth_dataset(DatasetSpec(examples_per_party=12), 1, 0)
    s = BatchStream(parties[0], 4, seed=0, stream=0)
    seen = np.concatenate([s.next_batch()[1] for _ in range(3)])
    assert sorted(seen.tolist()) == sorted(parties[0].labels.tolist())
    with pytest.raises(ConfigError):
        BatchStream(parties[0], 0, 0, 0)
