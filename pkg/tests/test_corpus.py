import itertools
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openlid.corpus import (
    LanguageRegistry,
    SegmentRef,
    SplitPlan,
    SynthSpec,
    generate_synthetic_corpus,
    make_split,
    parse_filename,
    render_filename,
    segment_utterance,
    write_wav,
)
from openlid.corpus.naming import Sex, UtteranceMeta
from openlid.corpus.registry import CU_MULTILANG_IN_SET, CU_MULTILANG_OUT_OF_SET
from openlid.corpus.split import _subset_near
from openlid.corpus.synth import make_languages
from openlid.errors import (
    ConfigError,
    DecodeError,
    DuplicateCode,
    InsufficientData,
    MalformedName,
)
from openlid.features import extract_mfcc

from conftest import make_meta


class TestParseFilename:
    def test_plain(self):
        m = parse_filename("eng_freest_f_spk12_0042.wav")
        assert (m.language_code, m.source_dataset, m.sex, m.speaker_id, m.index) == \
            ("eng", "freest", Sex.F, "spk12", 42)

    def test_underscored_source_and_unknowns(self):
        m = parse_filename("fra_media_speech_u_u_7.wav")
        assert m.source_dataset == "media_speech"
        assert m.sex is Sex.UNKNOWN and m.speaker_id is None and m.index == 7

    def test_anchoring_is_unique(self):
        # every way of reading a two-token middle as a source name must be the only parse
        tokens = ["fra", "media", "speech", "u", "u", "7"]
        parses = set()
        for cut in range(2, len(tokens) - 2):
            source = "_".join(tokens[1:cut])
            rest = tokens[cut:]
            if len(rest) == 3:
                parses.add((source, *rest))
        assert parses == {("media_speech", "u", "u", "7")}

    @pytest.mark.parametrize("name", ["eng_x.wav", "eng_a_m_s_x1.wav", "EnG_a_m_s_1.wav",
                                      "eng_a_q_s_1.wav", "eng_a_m_s_1.flac", "en_a_m_s_1.wav"])
    def test_malformed(self, name):
        with pytest.raises(MalformedName):
            parse_filename(name)

    def test_paths_differ_only_in_extension(self, tmp_path):
        (tmp_path / "eng_a_m_s1_0001.txt").write_text("hello")
        m = parse_filename(tmp_path / "eng_a_m_s1_0001.wav")
        assert os.path.splitext(m.audio_path)[0] == os.path.splitext(m.transcript_path)[0]

    @settings(max_examples=200, deadline=None)
    @given(
        lang=st.from_regex(r"[a-z]{3}", fullmatch=True),
        source=st.from_regex(r"[a-z0-9]+(_[a-z0-9]+){0,3}", fullmatch=True),
        sex=st.sampled_from(list(Sex)),
        spk=st.one_of(st.none(), st.from_regex(r"[a-z0-9]{1,6}", fullmatch=True).filter(lambda s: s != "u")),
        index=st.integers(0, 99999),
    )
    def test_round_trip(self, lang, source, sex, spk, index):
        name = render_filename(UtteranceMeta(lang, source, sex, spk, index))
        m = parse_filename(name)
        assert (m.language_code, m.source_dataset, m.sex, m.speaker_id, m.index) == (lang, source, sex, spk, index)


class TestSegmentation:
    @pytest.mark.parametrize("seconds,expected", [(10.0, 2), (4.0, 1), (3.9, 0)])
    def test_counts(self, seconds, expected):
        segs = segment_utterance(np.zeros(int(seconds * 16000)), make_meta())
        assert len(segs) == expected
        assert all(len(s.samples) == 64000 for s in segs)

    def test_resample_and_downmix(self):
        stereo = np.zeros((int(8.5 * 8000), 2))
        stereo[:, 0] = 0.5
        segs = segment_utterance(stereo, make_meta(), source_rate=8000)
        assert len(segs) == 2
        assert segs[0].sample_rate == 16000
        np.testing.assert_allclose(segs[0].samples, 0.25)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(0, 200000), seg_s=st.sampled_from([0.5, 1.0, 4.0]))
    def test_sample_conservation(self, n, seg_s):
        segs = segment_utterance(np.zeros(n), make_meta(), segment_s=seg_s)
        total = sum(len(s.samples) for s in segs)
        assert total <= n and n - total < int(seg_s * 16000)

    def test_rejects_non_16bit(self, tmp_path):
        import wave
        path = tmp_path / "eng_a_m_s_1.wav"
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(16000)
            w.writeframes(bytes(16000))
        with pytest.raises(DecodeError):
            segment_utterance(str(path), make_meta())

    def test_wav_round_trip(self, tmp_path):
        path = tmp_path / "eng_a_m_s_1.wav"
        x = 0.3 * np.sin(np.arange(70000) / 10)
        write_wav(path, x, 16000)
        segs = segment_utterance(str(path), make_meta())
        assert len(segs) == 1
        np.testing.assert_allclose(segs[0].samples, x[:64000], atol=1 / 32767)

    def test_bad_length(self):
        with pytest.raises(ConfigError):
            segment_utterance(np.zeros(10), make_meta(), segment_s=0)


class TestRegistry:
    def test_cu_multilang_default(self):
        reg = LanguageRegistry.cu_multilang_default()
        assert reg.n_in_set == 32 and len(reg.out_of_set) == 19
        assert not set(CU_MULTILANG_IN_SET) & set(CU_MULTILANG_OUT_OF_SET)

    def test_duplicates(self):
        with pytest.raises(DuplicateCode):
            LanguageRegistry(["eng", "fra"], ["eng"])
        reg = LanguageRegistry(["eng"], ["fra"])
        with pytest.raises(DuplicateCode):
            reg.with_enrolled("fra")
        assert reg.with_enrolled("deu").backend_labels == ["fra", "deu"]

    def test_fingerprint_tracks_order(self):
        a = LanguageRegistry(["eng", "fra"], [])
        b = LanguageRegistry(["fra", "eng"], [])
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == LanguageRegistry(["eng", "fra"], ["deu"]).fingerprint()

    def test_save_load(self, tmp_path):
        reg = LanguageRegistry(["eng", "fra"], ["deu"], ["ita"])
        reg.save(tmp_path / "r.json")
        assert LanguageRegistry.load(tmp_path / "r.json") == reg


def refs_for(lang, speaker_sizes, start=0):
    out = []
    for s, n in enumerate(speaker_sizes):
        for i in range(n):
            out.append(SegmentRef(f"{lang}/{lang}_x_m_s{s + start:02d}_{i:04d}.wav", 0, lang, f"s{s + start:02d}"))
    return out


def check_plan(plan, registry, refs):
    by_lang = Counter(r.language_code for r in refs)
    tags = {}
    for tag, r in plan.items():
        assert r not in tags, "segment assigned twice"
        tags[r] = tag
    assert set(tags) == set(refs)
    for lang, n in by_lang.items():
        c = Counter(tag for r, tag in tags.items() if r.language_code == lang)
        if registry.is_in_set(lang):
            side = c["tdnn_train"] + c["tdnn_val"]
            assert abs(side - round(0.95 * n)) <= 1
            assert abs(c["tdnn_val"] - round(0.10 * side)) <= 1
        else:
            assert abs(c["backend_fit"] - round(0.80 * n)) <= 1
        train_spk = {r.group_key for r, t in tags.items() if r.language_code == lang and t != "test"}
        test_spk = {r.group_key for r, t in tags.items() if r.language_code == lang and t == "test"}
        shared = {s.split("/", 1)[1] for s in plan.shared_speakers if s.startswith(f"{lang}/")}
        assert not (train_spk & test_spk) - shared


class TestSplit:
    def test_in_set_example(self):
        reg = LanguageRegistry(["eng"], [])
        refs = refs_for("eng", [10] * 10)
        plan = make_split(refs, reg, seed=3)
        assert abs(len(plan.tdnn_train) - 85) <= 1
        assert abs(len(plan.tdnn_val) - 10) <= 1
        assert abs(len(plan.test) - 5) <= 1
        check_plan(plan, reg, refs)

    def test_out_of_set_example(self):
        reg = LanguageRegistry(["eng"], ["fra"])
        refs = refs_for("fra", [10] * 10)
        plan = make_split(refs, reg, seed=3)
        assert abs(len(plan.backend_fit) - 80) <= 1 and abs(len(plan.test) - 20) <= 1
        check_plan(plan, reg, refs)

    def test_unequal_speakers_stay_disjoint(self):
        reg = LanguageRegistry(["eng"], ["fra"])
        refs = refs_for("eng", [4, 6, 8, 9, 10, 11, 12, 13, 13, 14]) + refs_for("fra", [5, 7, 9, 21])
        plan = make_split(refs, reg, seed=0)
        check_plan(plan, reg, refs)
        assert plan.shared_speakers == []

    def test_determinism_and_manifest(self):
        reg = LanguageRegistry(["eng"], ["fra"])
        refs = refs_for("eng", [7, 9, 11, 5, 8]) + refs_for("fra", [6, 6, 6, 6])
        a = make_split(refs, reg, seed=11)
        b = make_split(list(reversed(refs)), reg, seed=11)
        assert a.to_manifest() == b.to_manifest()
        back = SplitPlan.from_manifest(a.to_manifest())
        assert back.to_manifest() == a.to_manifest()

    def test_insufficient(self):
        reg = LanguageRegistry(["eng"], ["fra"])
        refs = refs_for("eng", [10, 10]) + refs_for("fra", [3, 3, 3])
        with pytest.raises(InsufficientData) as info:
            make_split(refs, reg, seed=0)
        assert set(info.value.languages) == {"eng", "fra"}

    def test_unknown_speakers_group_by_utterance(self):
        reg = LanguageRegistry(["eng"], [])
        refs = [SegmentRef(f"eng/u{u}.wav", i, "eng", None) for u in range(20) for i in range(3)]
        plan = make_split(refs, reg, seed=2)
        check_plan(plan, reg, refs)
        test_utts = {r.audio_path for r in plan.test}
        train_utts = {r.audio_path for r in plan.tdnn_train + plan.tdnn_val}
        assert not test_utts & train_utts

    @settings(max_examples=40, deadline=None)
    @given(sizes=st.lists(st.integers(1, 30), min_size=3, max_size=12).filter(lambda s: sum(s) >= 20),
           in_set=st.booleans(), seed=st.integers(0, 2**31))
    def test_ratio_property(self, sizes, in_set, seed):
        reg = LanguageRegistry(["eng"] if in_set else ["deu"], [] if in_set else ["eng"])
        refs = refs_for("eng", sizes)
        check_plan(make_split(refs, reg, seed), reg, refs)

    def test_subset_near_exhaustive(self):
        # counting oracle: compare against brute-force enumeration on small inputs
        rng = np.random.default_rng(0)
        for _ in range(100):
            sizes = rng.integers(1, 12, size=rng.integers(2, 8))
            target = int(rng.integers(1, sizes.sum()))
            chosen, total = _subset_near(sizes, target)
            assert sum(sizes[i] for i in chosen) == total
            sums = {sum(c) for r in range(len(sizes) + 1) for c in itertools.combinations(sizes.tolist(), r)}
            near = [t for t in (target, target - 1, target + 1) if t > 0 and t in sums]
            assert total == (near[0] if near else max(t for t in sums if t <= target))


class TestSynth:
    def test_layout_and_names(self, tmp_path):
        spec = SynthSpec(n_languages=4, n_speakers=5, minutes_per_lang=2.0, seed=7)
        generate_synthetic_corpus(spec, tmp_path)
        dirs = sorted(p.name for p in tmp_path.iterdir())
        assert dirs == ["sy0", "sy1", "sy2", "sy3"]
        for d in dirs:
            wavs = list((tmp_path / d).glob("*.wav"))
            assert wavs
            for w in wavs:
                m = parse_filename(w)
                assert m.language_code == d
                assert m.transcript_path is not None

    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(n_languages=2, n_speakers=3, minutes_per_lang=0.5, seed=5)
        generate_synthetic_corpus(spec, tmp_path / "a")
        generate_synthetic_corpus(spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_separation_rules(self):
        spec = SynthSpec(n_languages=10, n_speakers=3, minutes_per_lang=1.0, seed=1)
        langs = make_languages(spec)
        mel = lambda f: 1127.0 * np.log1p(f / 700.0)  # noqa: E731
        for a, b in itertools.combinations(langs, 2):
            for u in a.formants:
                for v in b.formants:
                    assert np.linalg.norm(u - v) >= spec.min_formant_sep
        vowels = np.concatenate([lang.formants for lang in langs])
        for u, v in itertools.combinations(vowels, 2):
            assert np.linalg.norm(mel(u[:2]) - mel(v[:2])) >= spec.min_vowel_sep_mel
        # one vowel per F1 band, bands in ascending order
        f1 = np.array([np.sort(lang.formants[:, 0]) for lang in langs])
        assert np.all(f1[:, :-1].max(axis=0) <= f1[:, 1:].min(axis=0))

    def test_infeasible_separation(self):
        with pytest.raises(ConfigError):
            make_languages(SynthSpec(n_languages=10, n_speakers=3, minutes_per_lang=1.0,
                                     min_vowel_sep_mel=400.0))

    def test_too_few_languages(self):
        with pytest.raises(ConfigError):
            make_languages(SynthSpec(n_languages=1, n_speakers=2, minutes_per_lang=1.0))

    def test_gaussian_oracle_on_mean_mfcc(self, tmp_path):
        # two far-apart languages must be separable by a plain Gaussian classifier
        spec = SynthSpec(n_languages=2, n_speakers=6, minutes_per_lang=2.0, seed=3)
        generate_synthetic_corpus(spec, tmp_path)
        x, y, spk = [], [], []
        for lang in ("sy0", "sy1"):
            for w in sorted((tmp_path / lang).glob("*.wav")):
                meta = parse_filename(w)
                for seg in segment_utterance(str(w), meta):
                    x.append(extract_mfcc(seg).mean(axis=0))
                    y.append(int(lang[-1]))
                    spk.append(meta.speaker_id)
        x, y, spk = np.array(x), np.array(y), np.array(spk)
        speakers = sorted(set(spk))
        test = np.isin(spk, speakers[::3])  # held-out speakers
        means = [x[~test & (y == c)].mean(axis=0) for c in (0, 1)]
        cov = sum(np.cov(x[~test & (y == c)].T) for c in (0, 1)) / 2 + 1e-6 * np.eye(x.shape[1])
        inv = np.linalg.inv(cov)
        score = [np.einsum("ij,jk,ik->i", x[test] - m, inv, x[test] - m) for m in means]
        pred = np.argmin(np.stack(score), axis=0)
        assert np.mean(pred == y[test]) > 0.95
