"""Train on three modalities, drop one at test time, and win some accuracy back.

The zero-filled pretrained model is compared against modality duplication,
a dedicated model per subset, and a ScaleShift bank on the frozen network.
Takes about a minute on one CPU core.
"""

import numpy as np

from madapt.adapters import count_learnable, enumerate_subsets
from madapt.evaluation import cosine_similarity_analysis, evaluate_arm
from madapt.model import ModalitySubset, ModelSpec
from madapt.synth import TaskConfig, generate, oracle_accuracy
from madapt.training import TrainConfig, adapt, pretrain, train_dedicated

seed = 42
data = generate(TaskConfig(seed=seed))
spec = ModelSpec(num_modalities=3, input_dims=(12, 12, 12), tokens_per_modality=4,
                 embed_dim=16, encoder_depth=2, num_classes=6, seed=seed)
full_cfg = TrainConfig(epochs=30, batch_size=32, base_lr=3e-3, warmup_epochs=3, seed=seed)
bank_cfg = TrainConfig(epochs=30, batch_size=32, base_lr=1e-2, warmup_epochs=3, seed=seed)

theta, log = pretrain(spec, data.train, full_cfg)
theta.freeze()
print("pretraining loss, first vs last 10% of steps:", log.window_means())
full = ModalitySubset.full(3)
print(f"complete inputs: accuracy {evaluate_arm('pretrained', full, data.test, theta).accuracy:.3f}, "
      f"nearest-prototype reference {oracle_accuracy(data, full):.3f}")

# %% one row per subset with a modality missing
print(f"\n{'subset':7s} {'pretrained':>10s} {'duplicate':>10s} {'dedicated':>10s} {'adapted':>8s} {'oracle':>7s} {'params':>7s}")
for s in enumerate_subsets(3):
    bank, _ = adapt(theta, s, "scale_shift", data.train, bank_cfg)
    dedicated, _ = train_dedicated(spec, s, data.train, full_cfg)
    row = [evaluate_arm(arm, s, data.test, theta, dedicated=dedicated, bank=bank).accuracy
           for arm in ("pretrained", "duplication", "dedicated", "adapted")]
    count, _ = count_learnable(spec, s, "scale_shift")
    print(f"{s.label():7s} " + " ".join(f"{v:10.3f}" for v in row[:3])
          + f" {row[3]:8.3f} {oracle_accuracy(data, s):7.3f} {count:7d}")

    if len(s.available) == 1:
        rep = cosine_similarity_analysis(theta, bank, s, data.test)
        pre = np.round(rep.pretrained, 2).tolist()
        ada = np.round(rep.adapted, 2).tolist()
        print(f"        per-class similarity to complete-input features: {pre} -> {ada}")
