"""
Learning a periodic graph
=========================

Every (subject, predicate) pair alternates between two objects. A few epochs
are enough for the model to predict the next object in the future split.
"""

import torch

from wgpnn.config import TrainConfig
from wgpnn.graph import Quadruple
from wgpnn.synth import PeriodicGenerator
from wgpnn.training import TKGData, Trainer, split_by_time

torch.set_num_threads(1)

gen = PeriodicGenerator(num_entities=8, num_predicates=2, period=2, horizon=200, seed=0)
quads = [Quadruple(s, p, o, t) for s, p, o, t, _ in gen.events()]
data = TKGData.from_splits(*split_by_time(quads), num_entities=8, num_predicates=2)
print(len(data.train), "train,", len(data.valid), "valid,", len(data.test), "test events")

trainer = Trainer(data, TrainConfig(dim=32, num_points=2, window=4))
print("untrained test MRR:", round(trainer.evaluate("test").mrr, 4))

for _ in range(8):
    loss = trainer.train_epoch()
    print(f"epoch {trainer.epoch}  loss {loss:.4f}  valid MRR {trainer.evaluate('valid').mrr:.4f}")

report = trainer.evaluate("test")
for direction, by_protocol in report.summary().items():
    m = by_protocol["filtered"]
    print(f"{direction:8s} filtered MRR {m['mrr']:.4f}  hits@1 {m['hits@1']:.4f}  hits@10 {m['hits@10']:.4f}")

# the learned length scale
print("gamma:", trainer.model.gamma.item())
