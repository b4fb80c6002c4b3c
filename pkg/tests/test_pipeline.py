import json
import sys

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from scipy import stats

from ctefm.cli import main
from ctefm.corpus import CorpusExistsError, synth_corpus
from ctefm.data import FeatureCache, read_manifest
from ctefm.features import MelSpectrogram, default_registry, embed_mel_all
from ctefm.losses import secs
from ctefm.pipeline import ConversionRequest, ExternalVocoder, IdentityMelVocoder, evaluate, make_vocoder
from ctefm.tensorfile import load_tensor
from conftest import TINY


@pytest.fixture(scope="module")
def tiny_toml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    lines = [f"{k} = {list(v) if isinstance(v, tuple) else v}" for k, v in TINY.items()]
    lines += ["batch_size = 2", "segment_frames = 32", "checkpoint_every = 2"]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def checkpoint(corpus, tiny_toml, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = CliRunner().invoke(main, ["train", "--config", str(tiny_toml), "--manifest", str(corpus),
                                    "--out-dir", str(out), "--max-iters", "3", "--seed", "1"])
    assert res.exit_code == 0, res.output
    return out / "final.ctefm"


def wav(items, k):
    return items[k].path


# -- corpus ------------------------------------------------------------------------------


def test_corpus_counts_and_determinism(tmp_path):
    m1 = synth_corpus(2, 3, tmp_path / "a", seed=5)
    m2 = synth_corpus(2, 3, tmp_path / "b", seed=5)
    rows = [json.loads(l) for l in m1.read_text().splitlines()]
    assert len(rows) == 6 and len(list((tmp_path / "a" / "wavs").iterdir())) == 6
    assert {r["split"] for r in rows} == {"train", "val"}
    assert m1.read_bytes() == m2.read_bytes()
    for r in rows:
        assert (tmp_path / "a" / r["path"]).read_bytes() == (tmp_path / "b" / r["path"]).read_bytes()
    with pytest.raises(CorpusExistsError):
        synth_corpus(2, 3, tmp_path / "a", seed=5)
    synth_corpus(1, 2, tmp_path / "a", seed=6, force=True)


def test_corpus_speakers_are_separable(items):
    reg = default_registry(0)
    cache = FeatureCache(reg)
    embs = [(it.speaker_id, embed_mel_all(reg, torch.from_numpy(cache.get(it).mel))) for it in items]
    intra, inter = [], []
    for i, (sa, ea) in enumerate(embs):
        for sb, eb in embs[i + 1 :]:
            v = float(np.mean([float(secs(a, b)) for a, b in zip(ea, eb)]))
            (intra if sa == sb else inter).append(v)
    assert np.mean(intra) - np.mean(inter) > 0.3


# -- evaluation ---------------------------------------------------------------------------------


def test_stub_conversion_scores_one(items):
    reg = default_registry(0, TINY["sv_dims"], TINY["content_dim"])
    rep = evaluate(items, reg, lambda src, ref, seed: ref.mel, n_pairs=6, seed=0)
    assert rep["secs_mean"] == pytest.approx(1.0, abs=1e-12)
    assert all(v == pytest.approx(1.0, abs=1e-12) for v in rep["secs_per_provider"].values())
    assert rep["mel_mse_teacher"] == 0.0
    assert rep["direction_rate"] == 1.0
    json.loads(json.dumps(rep))


def test_pairs_use_other_speakers(items):
    reg = default_registry(0, TINY["sv_dims"], TINY["content_dim"])
    rep = evaluate(items, reg, lambda src, ref, seed: src.mel, n_pairs=9, seed=3)
    spk = lambda utt_id: utt_id.split("_")[0]
    for p in rep["pairs"]:
        assert len({spk(p["source"]), spk(p["reference"]), spk(p["distractor"])}) == 3
    again = evaluate(items, reg, lambda src, ref, seed: src.mel, n_pairs=9, seed=3)
    assert again == rep


def test_single_speaker_rejected(items):
    reg = default_registry(0, TINY["sv_dims"], TINY["content_dim"])
    one = [it for it in items if it.speaker_id == items[0].speaker_id]
    with pytest.raises(ValueError, match="2 speakers"):
        evaluate(one, reg, lambda s, r, k: s.mel)


def test_untrained_model_sits_at_inter_speaker_baseline(corpus, checkpoint, tmp_path):
    from ctefm.pipeline import run_eval

    rep = run_eval(corpus, checkpoint, tmp_path / "r.json", seed=0, n_pairs=9, steps=4, split=None)
    outs = [p["secs"] for p in rep["pairs"]]
    base = [p["reference_vs_distractor"] for p in rep["pairs"]]
    assert stats.ttest_ind(outs, base, equal_var=False).pvalue > 0.001
    assert json.loads((tmp_path / "r.json").read_text())["n_pairs"] == 9


# -- conversion -----------------------------------------------------------------------------------------


def test_request_invariants():
    with pytest.raises(ValueError):
        ConversionRequest("a.wav", "b.wav", "a.wav", "c.ctefm")
    with pytest.raises(ValueError):
        ConversionRequest("a.wav", "b.wav", "b.wav", "c.ctefm")
    with pytest.raises(ValueError):
        ConversionRequest("a.wav", "b.wav", "o.ctefm", "c.ctefm", euler_steps=0)
    assert ConversionRequest("a.wav", "a.wav", "o.ctefm", "c.ctefm").euler_steps == 20


def test_vocoders(tmp_path):
    mel = MelSpectrogram(np.arange(12.0).reshape(3, 4))
    IdentityMelVocoder().write(mel, tmp_path / "m.ctefm")
    assert np.array_equal(load_tensor(tmp_path / "m.ctefm"), mel.frames)
    script = "import shutil, sys; shutil.copy(sys.argv[1], sys.argv[2])"
    voc = make_vocoder("external", f'"{sys.executable}" -c "{script}" {{mel}} {{wav}}')
    assert isinstance(voc, ExternalVocoder)
    voc.write(mel, tmp_path / "out.wav")
    assert (tmp_path / "out.wav").read_bytes() == (tmp_path / "m.ctefm").read_bytes()
    with pytest.raises(ValueError):
        ExternalVocoder("vocode --in x")
    with pytest.raises(ValueError):
        make_vocoder("bigvgan")


def convert_args(items, ckpt, out, seed=0, steps=3, ref=1):
    return ["convert", "--source", wav(items, 0), "--reference", wav(items, ref), "--output", str(out),
            "--checkpoint", str(ckpt), "--euler-steps", str(steps), "--seed", str(seed)]


def test_convert_is_deterministic(items, checkpoint, tmp_path):
    r = CliRunner()
    assert r.invoke(main, convert_args(items, checkpoint, tmp_path / "a.ctefm")).exit_code == 0
    assert r.invoke(main, convert_args(items, checkpoint, tmp_path / "b.ctefm")).exit_code == 0
    assert r.invoke(main, convert_args(items, checkpoint, tmp_path / "c.ctefm", seed=1)).exit_code == 0
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.ctefm", "b.ctefm", "c.ctefm"))
    assert a == b and a != c
    frames = load_tensor(tmp_path / "a.ctefm")
    src_frames = FeatureCache(default_registry(0, TINY["sv_dims"], TINY["content_dim"])).get(items[0]).mel.shape[0]
    assert frames.shape == (src_frames, 80)


def test_convert_rejects_wrong_rate(items, checkpoint, tmp_path):
    import wave

    with wave.open(str(tmp_path / "r8k.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(np.zeros(16000, dtype="<i2").tobytes())
    args = convert_args(items, checkpoint, tmp_path / "o.ctefm")
    args[args.index("--reference") + 1] = str(tmp_path / "r8k.wav")
    res = CliRunner().invoke(main, args)
    assert res.exit_code != 0
    assert "8000" in res.output


# -- CLI contract -------------------------------------------------------------------------------------------


def test_train_zero_iters_writes_checkpoint(corpus, tiny_toml, tmp_path):
    res = CliRunner().invoke(main, ["train", "--config", str(tiny_toml), "--manifest", str(corpus),
                                    "--out-dir", str(tmp_path), "--max-iters", "0", "--seed", "0"])
    assert res.exit_code == 0, res.output
    from ctefm.checkpoint import load_checkpoint

    assert load_checkpoint(tmp_path / "final.ctefm").iteration == 0


def test_train_writes_metrics_and_checkpoints(checkpoint):
    run = checkpoint.parent
    assert sorted(p.name for p in run.iterdir()) == ["ckpt_000002.ctefm", "final.ctefm", "metrics.jsonl"]
    rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == [1, 2, 3]


def test_missing_manifest_exits_2(tmp_path):
    res = CliRunner().invoke(main, ["train", "--manifest", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)])
    assert res.exit_code == 2
    assert "nope.jsonl" in res.output


@pytest.mark.parametrize(
    "args",
    [
        ["train", "--config", "{bad}", "--manifest", "{manifest}", "--out-dir", "{tmp}"],
        ["synth-corpus", "--n-speakers", "1", "--n-utts", "1", "--out-dir", "{nonempty}", "--seed", "0"],
        ["eval", "--manifest", "{one_speaker}", "--checkpoint", "{ckpt}", "--out-report", "{tmp}/r.json"],
        ["eval", "--manifest", "{manifest}", "--checkpoint", "{manifest}", "--out-report", "{tmp}/r.json"],
    ],
)
def test_error_paths_exit_nonzero(args, corpus, checkpoint, items, tmp_path):
    (tmp_path / "bad.toml").write_text("bogus_key = 1\n")
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "x").write_text("x")
    one = tmp_path / "one.jsonl"
    one.write_text("\n".join(json.dumps({"path": it.path, "speaker_id": it.speaker_id, "split": "val"})
                             for it in items if it.speaker_id == items[0].speaker_id))
    fill = dict(bad=tmp_path / "bad.toml", manifest=corpus, tmp=tmp_path, nonempty=tmp_path / "full",
                one_speaker=one, ckpt=checkpoint)
    res = CliRunner().invoke(main, [a.format(**fill) for a in args])
    assert res.exit_code != 0
    assert res.output.strip()


def test_eval_cli_report(corpus, checkpoint, tmp_path):
    res = CliRunner().invoke(main, ["eval", "--manifest", str(corpus), "--checkpoint", str(checkpoint),
                                    "--out-report", str(tmp_path / "r.json"), "--seed", "2", "--n-pairs", "3",
                                    "--euler-steps", "2"])
    assert res.exit_code == 0, res.output
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"pairs", "secs_mean", "secs_per_provider", "mel_mse_teacher"} <= set(rep)
    assert len(rep["pairs"]) == 3 and len(rep["secs_per_provider"]) == 3
