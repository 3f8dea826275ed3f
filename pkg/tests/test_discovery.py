import numpy as np
import pytest
from hypothesis import given, strategies as st

from cltprobe.clt import FeatureId
from cltprobe.discovery import (VocabScanEntry, build_rhyme_groups, decoder_vectors, is_clean_token,
                                keyword_domain_scan, load_cmu, parse_cmu, rhyme_ending, scan_vocabulary)

VOWELS = ["AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"]
CONSONANTS = ["B", "D", "F", "G", "K", "L", "M", "N", "P", "R", "S", "T", "V", "Z"]


def test_rhyme_ending_examples():
    assert rhyme_ending("AH0 B AW1 T") == "AW1 T"
    assert rhyme_ending(["ER0", "AW1", "N", "D"]) == "AW1 N D"
    assert rhyme_ending("T R IY1") == "IY1"
    # secondary stress counts when there is no primary stress
    assert rhyme_ending("AH0 B AW2 T") == "AW2 T"
    assert rhyme_ending("N OW1 B AH0 D IY0") == "OW1 B AH0 D IY0"


def test_parse_cmu_keeps_first_pronunciation(discovery):
    pron = parse_cmu(discovery.cmu)
    assert pron["about"].phonemes == ("AH0", "B", "AW1", "T")
    assert "about(1)" not in pron and len(pron) == 8


def test_load_cmu_latin1(tmp_path):
    p = tmp_path / "cmu.txt"
    p.write_bytes(";;; header\nCAFÉ  K AE0 F EY1\n".encode("latin-1"))
    assert load_cmu(p)["café"].phonemes == ("K", "AE0", "F", "EY1")


def test_clean_token():
    assert is_clean_token(" around") and is_clean_token("▁tree") and is_clean_token("Long")
    for bad in ("##ing", "()", " 42", "", " ", " é"):
        assert not is_clean_token(bad)


def test_scan_finds_planted_features(discovery):
    scan = scan_vocabulary(discovery.clt, discovery.model.W_E, discovery.vocab)
    by_feature = {str(e.feature): e for e in scan}
    for word, f in discovery.circuit["rhyme_features"].items():
        tid, surface, cos = by_feature[f].top1
        assert surface.strip() == word and cos == pytest.approx(1.0, abs=1e-9)


def test_home_decoder_mode_differs_from_sum(discovery):
    sh = discovery.clt.shard(0)
    assert np.allclose(decoder_vectors(sh, "sum"), sh.W_dec.sum(axis=1))
    assert np.array_equal(decoder_vectors(sh, "home"), sh.W_dec[:, 0])
    with pytest.raises(ValueError):
        decoder_vectors(sh, "mean")


def test_chunk_size_does_not_change_scan(discovery):
    args = (discovery.clt, discovery.model.W_E, discovery.vocab)
    a = scan_vocabulary(*args, chunk_size=1, clean_only=False)
    b = scan_vocabulary(*args, chunk_size=4096, clean_only=False)
    assert [(x.feature, [t for t, _, _ in x.top_tokens]) for x in a] == \
        [(x.feature, [t for t, _, _ in x.top_tokens]) for x in b]
    ca = np.array([[c for _, _, c in x.top_tokens] for x in a])
    cb = np.array([[c for _, _, c in x.top_tokens] for x in b])
    assert np.allclose(ca, cb, rtol=0, atol=1e-12)


def test_rhyme_groups_cosine_floor(discovery):
    scan = scan_vocabulary(discovery.clt, discovery.model.W_E, discovery.vocab)
    pron = parse_cmu(discovery.cmu)
    strict = build_rhyme_groups(scan, pron, min_cosine=0.99)
    assert {g.ending for g in strict} == {"AW1 T", "AW1 N D"}
    assert all(c >= 0.99 for g in strict for _, _, c in g.members)
    assert build_rhyme_groups(scan, pron, min_words=5) == []


def test_keyword_scan_duration_feature(discovery):
    scan = scan_vocabulary(discovery.clt, discovery.model.W_E, discovery.vocab)
    hits = keyword_domain_scan(scan, ["long", "int"])
    dur = [h for h in hits["long"] if str(h.feature) == discovery.circuit["duration_feature"]]
    assert dur and dur[0].rank == 0
    with pytest.raises(ValueError):
        keyword_domain_scan(scan, [])


def test_scan_entry_roundtrip():
    e = VocabScanEntry(FeatureId(2, 5), ((3, " out", 0.5), (1, " the", 0.25)))
    assert VocabScanEntry.from_dict(e.to_dict()) == e


@given(st.lists(st.sampled_from(CONSONANTS), max_size=3), st.sampled_from(VOWELS),
       st.lists(st.sampled_from(CONSONANTS), max_size=3), st.sampled_from(VOWELS))
def test_rhyme_ending_is_suffix_from_last_primary(onset, v1, coda, v0):
    phones = onset + [v0 + "0"] + [v1 + "1"] + coda
    ending = rhyme_ending(phones)
    assert ending.split() == [v1 + "1"] + coda
    assert " ".join(phones).endswith(ending)
