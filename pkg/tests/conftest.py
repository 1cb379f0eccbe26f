import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from biodg import harness as H  # noqa: E402

# small corpus for harness and CLI tests. 4+4 three-second records per basis
# domain keep both classes in every inner split at k=2.
def tiny_presets():
    basis = {k: {**v, "n_records": (4, 4), "record_s": 3.0} for k, v in H.BASIS_PRESET.items()}
    unseen = {k: {**v, "n_records": (2, 2), "record_s": 3.0} for k, v in H.UNSEEN_PRESET.items()}
    return basis, unseen


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    basis, unseen = tiny_presets()
    H.build_synthetic_corpus(out, seed=3, basis=basis, unseen=unseen)
    H.extract_features(out)
    return out


def tiny_config(corpus, out, **over):
    cfg = H.ExperimentConfig(corpus_dir=str(corpus), out_dir=str(out), epochs=1, k_folds=2, inner_val_k=2,
                             mc_samples=2, batch_size=32, seed=5)
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
