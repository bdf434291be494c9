"""A frozen backbone meets a user whose images look different.

The backbone was trained on all eight classes of untinted images. The user
only cares about four classes and their camera adds a gain and an offset.
Neither half of the backbone may change, so the client trains a small
residual adapter on the features it sends to the server.

    python demos/01_adapt_to_a_new_user.py [backbone.smdl]
"""

from _common import setup

from saltlab.rng import RngStream
from saltlab.split import Adapter, split_at
from saltlab.trainer import TrainConfig, evaluate, train_adapter

cfg, backbone, data = setup()
model = split_at(backbone, "AfterBlock2")
print(f"split at {model.split_point}: features {model.latent_shape} cross the network")

before = evaluate(model, None, data.test)
print(f"without adaptation: accuracy {before.accuracy:.3f}")

adapter = Adapter(model.latent_shape, "residual", RngStream(0).fork("adapter"))
adapter, report = train_adapter(model, adapter, data.train, data.val, TrainConfig(seed=0))
after = evaluate(model, adapter, data.test)
print(f"with a residual adapter: accuracy {after.accuracy:.3f} after {report.epochs} epochs "
      f"(best {report.best_epoch})")
print(f"head unchanged: {report.head_digest[0] == report.head_digest[1]}, "
      f"tail unchanged: {report.tail_digest[0] == report.tail_digest[1]}")
print(f"modelled transfer time: {report.t_comm_total_s:.2f} s over {report.latency_model.epochs} epochs")
