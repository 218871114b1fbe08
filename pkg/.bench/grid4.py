import time
import numpy as np
from capsintent.datasets import mimic_grabo_spec, synth_generate, split_blocks
from capsintent.capsnet import ModelConfig
from capsintent.experiments import fit, evaluate_model, _blocks_train_test

def run(noise, hidden, P, dp, tag, epochs=60):
    spec = mimic_grabo_spec(per_speaker_count=364, noise_level=noise)
    corpus = synth_generate(spec, seed=11)
    split = split_blocks(corpus, 150, "speaker_independent", seed=5)
    train_ids, test_ids = _blocks_train_test(split.blocks, 20)
    cfg = ModelConfig(feat_dim=16, num_labels=33, speaker_count=11, encoder_hidden=hidden,
                      encoder_layers=2, num_primary=P, primary_dim=dp, output_dim=8,
                      routing_iters=3, speaker_weight=1.0, seed=42)
    t0 = time.time()
    res = fit(corpus.subset(train_ids), cfg, epochs=epochs)
    h = res.history
    traj = " ".join(f"{h[i].label_loss:.2f}" for i in range(0, len(h), 10))
    m = evaluate_model(corpus.subset(test_ids), res.params, cfg, corpus.vocab)
    print(f"[{tag}] noise={noise} H={hidden} P={P} dp={dp}: {time.time()-t0:.0f}s ep={len(h)} "
          f"L_l traj [{traj}] final L_l={h[-1].label_loss:.3f} L_s={h[-1].speaker_loss:.3f} "
          f"f1={m['f1']:.4f} spk={m['speaker_accuracy']:.4f}", flush=True)

run(0.2, 32, 64, 8, "H-stationary")
run(0.2, 48, 64, 8, "I-stationary")
