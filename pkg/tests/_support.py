"""Shared builders for the test modules."""
import numpy as np

from cltprobe.clt import FeatureEdit, FeatureId
from cltprobe.model import LayerMask, ResidualEdit, ResidualPatch
from cltprobe.planning import CorrectionConfig, SweepConfig


def planted_sweep_config(bundle, **kw) -> SweepConfig:
    c = bundle.circuit
    args = dict(prompt=tuple(bundle.vocab.encode(c["prompts"]["natural"])),
                suppress_group=(FeatureId.parse(c["natural_feature"]),),
                inject_feature=FeatureId.parse(c["target_feature"]),
                strength=c["strength"], target_word=c["target_word"])
    args.update(kw)
    return SweepConfig(**args)


def planted_correction_config(bundle, grid=(0, 1, 2, 5, 10, 15, 20)) -> CorrectionConfig:
    c = bundle.circuit
    toks = tuple(bundle.vocab.encode(c["prompts"]["natural"]))
    site = len(toks) - 1
    L = bundle.model.spec.n_layers
    commit = (FeatureEdit.make(c["natural_feature"], "suppress", c["strength"], site, n_layers=L),
              FeatureEdit.make(c["target_feature"], "inject", c["strength"], site, n_layers=L))
    return CorrectionConfig(toks, commit, c["target_word"], FeatureId.parse(c["correction_feature"]),
                            tuple(c["correction_layers"]), c["competing_word"],
                            tuple(float(g) for g in grid))


def fuzz_case(rng: np.random.Generator, spec, max_len: int = 12, max_edits: int = 3,
              edit_scale: float = 1.0, with_patches: bool = True):
    """A random (tokens, edits, mask, patches) tuple for engine/oracle comparison."""
    T = int(rng.integers(2, min(max_len, spec.n_ctx) + 1))
    tokens = [int(t) for t in rng.integers(0, spec.vocab_size, T)]
    edits = [ResidualEdit(int(rng.integers(0, spec.n_layers)), int(rng.integers(0, T)),
                          edit_scale * rng.standard_normal(spec.d_model), "fuzz")
             for _ in range(int(rng.integers(0, max_edits + 1)))]
    skipped = [l for l in range(spec.n_layers) if rng.random() < 0.2]
    patches = []
    if with_patches and rng.random() < 0.3:
        patches = [ResidualPatch(int(rng.integers(0, spec.n_layers)), int(rng.integers(0, T)),
                                 rng.standard_normal(spec.d_model), "fuzz")]
    return tokens, edits, LayerMask.of(skipped), patches


def relative_error(engine: np.ndarray, reference: np.ndarray) -> float:
    """Norm-wise relative error ||engine - reference|| / ||reference||."""
    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(engine, dtype=np.float64) - ref
    return float(np.linalg.norm(diff) / max(np.linalg.norm(ref), 1e-300))
