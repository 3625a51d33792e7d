import numpy as np
import pytest

from cdrdesign.config import AttentionConfig, DecoderConfig, EncoderConfig, ModelConfig
from cdrdesign.structure import Complex, Residue
from cdrdesign.synthetic import SynthParams, generate_synthetic_complex


def residue(ca, aa=0):
    """Backbone residue with idealised offsets around ``ca``."""
    ca = np.asarray(ca, dtype=float)
    atoms = np.stack([ca + [-0.5, 1.37, 0.0], ca, ca + [1.52, 0.0, 0.0], ca + [2.1, 1.0, 0.0]])
    return Residue(aa, atoms)


def line_complex(cdr_ca, antigen_ca, epitope=(0,), cid="toy", antigen_aa=3):
    """Heavy chain made only of the CDR, no light chain."""
    heavy = tuple(residue(p, k % 20) for k, p in enumerate(cdr_ca))
    antigen = tuple(residue(p, antigen_aa) for p in antigen_ca)
    return Complex(cid, heavy, (), antigen, (0, len(heavy)), tuple(epitope))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth():
    c, labels = generate_synthetic_complex(7, SynthParams(cdr_len=8, antigen_len=16))
    return c, labels


def small_model_config(n_layers=2):
    """Narrow model that keeps tests fast."""
    return ModelConfig(
        encoder=EncoderConfig(hidden_dim=32, message_dim=16, n_layers=n_layers, geom_hidden=16, chem_hidden=8, fuse_hidden=16, coord_hidden=8),
        attention=AttentionConfig(heads=2, head_dim=16),
        decoder=DecoderConfig(fingerprint_hidden=16, contact_hidden=(16, 16), proj_hidden=16, seq_hidden=16),
    )
