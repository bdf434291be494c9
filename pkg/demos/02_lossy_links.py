"""Dropped feature elements on a lossy link, and an adapter that learns to cope.

Each element of the transmitted feature tensor is zeroed with probability p.
The unadapted model degrades as p grows; an adapter trained through the same
channel recovers most of the accuracy.

    python demos/02_lossy_links.py [backbone.smdl]
"""

from _common import setup

from saltlab.channel import ChannelSpec
from saltlab.rng import RngStream
from saltlab.split import Adapter, split_at
from saltlab.trainer import TrainConfig, evaluate, train_adapter

cfg, backbone, data = setup()
model = split_at(backbone, "AfterBlock2")
print(" p     unadapted  adapted")
for p in (0.0, 0.25, 0.5, 0.75):
    channel = ChannelSpec.packet_loss(p)
    plain = evaluate(model, None, data.test, channel, 0).accuracy
    adapter = Adapter(model.latent_shape, "residual", RngStream(0).fork("adapter"))
    adapter, _ = train_adapter(model, adapter, data.train, data.val, TrainConfig(seed=0, forward_channel=channel))
    adapted = evaluate(model, adapter, data.test, channel, 0).accuracy
    print(f" {p:<5} {plain:9.3f}  {adapted:7.3f}")
