import numpy as np
from capsintent.datasets import mimic_grabo_spec, synth_generate, split_blocks
from capsintent.capsnet import ModelConfig, forward, decode_labels
from capsintent.experiments import fit, _blocks_train_test
import capsintent.model as model

spec = mimic_grabo_spec(per_speaker_count=364, noise_level=0.2)
corpus = synth_generate(spec, seed=11)
split = split_blocks(corpus, 150, "speaker_independent", seed=5)
train_ids, test_ids = _blocks_train_test(split.blocks, 20)
cfg = ModelConfig(feat_dim=16, num_labels=33, speaker_count=11, encoder_hidden=32,
                  encoder_layers=2, num_primary=64, primary_dim=8, output_dim=8,
                  routing_iters=3, speaker_weight=1.0, seed=42)
res = fit(corpus.subset(train_ids), cfg, epochs=30)
vocab = corpus.vocab

stats = {g.name: {"fp": 0, "fn": 0, "wrong": 0, "n_present": 0, "n_absent": 0} for g in vocab.slot_groups}
present_norms, absent_group_max_norms = [], []
for utt in corpus.subset(test_ids)[:800]:
    caps, _ = forward(utt.features, res.params, cfg, want_trace=False)
    pred = set(decode_labels(caps, vocab))
    ref = set(vocab.names_of(utt.target))
    for g in vocab.slot_groups:
        gl = set(g.labels)
        p, r = pred & gl, ref & gl
        idxs = [vocab.index_of(n) for n in g.labels]
        gmax = caps.norms[idxs].max()
        if r:
            stats[g.name]["n_present"] += 1
            ridx = vocab.index_of(next(iter(r)))
            present_norms.append(caps.norms[ridx])
            if not p: stats[g.name]["fn"] += 1
            elif p != r: stats[g.name]["wrong"] += 1
        else:
            stats[g.name]["n_absent"] += 1
            absent_group_max_norms.append(gmax)
            if p: stats[g.name]["fp"] += 1
for name, s in stats.items():
    print(name, s)
present_norms = np.array(present_norms); agm = np.array(absent_group_max_norms)
print("present-label norms: mean %.3f  p10 %.3f  p50 %.3f  frac<0.5 %.3f" % (
    present_norms.mean(), np.percentile(present_norms,10), np.percentile(present_norms,50), (present_norms<0.5).mean()))
print("absent-group max norms: mean %.3f  p90 %.3f  frac>0.5 %.3f" % (
    agm.mean(), np.percentile(agm,90), (agm>0.5).mean()))
