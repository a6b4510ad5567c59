"""
Prototypical networks on a synthetic store
==========================================

Meta-train a ProtoNet on Gaussian class clusters and meta-test it on
classes it never saw during training.
"""
import numpy as np

from metadro.episodes import TaskSpec, sample_episode
from metadro.synth import SynthSpec, generate
from metadro.trainer import TrainConfig, meta_train

# 20 classes in 16 dimensions, 100 records each
store = generate(SynthSpec(dim=16, classes=20, records_per_class=100, scale=5.0, noise=1.0, seed=0))
print(len(store), "records,", len(store.classes), "classes")

# one 10-way 5-shot episode, just to look at its layout
ep = sample_episode(store, TaskSpec(10, 5, 1), None, np.random.default_rng(0))
print("support", ep.support_x.shape, "query", ep.query_x.shape, "classes", ep.class_map[:3], "...")

# half the classes train, the other half are held out for meta-testing
config = TrainConfig(task=TaskSpec(10, 5, 1), hidden=(), embed_dim=64, outer_lr=0.001, meta_batch_size=8,
                     iterations=500, eval_interval=100, eval_tasks=300, split_fractions=(0.5, 0.0, 0.5))


def report(rec, selected):
    print(f"iteration {rec.iteration:4d}  {rec.format_row()}")


result = meta_train(config, store, on_eval=report)
print()
print(result.history[-1].format_table("ProtoNet"))
