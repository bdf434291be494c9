"""Split training across a real socket.

A server thread hosts the frozen tail and answers each feature batch with
the loss and the gradient with respect to those features. The client
keeps its adapter private; only features, labels and gradients travel.
The result is bit-identical to training in one process.

    python demos/04_over_the_wire.py [backbone.smdl]
"""

from _common import setup

from saltlab.protocol import SocketTransport, serve_in_thread
from saltlab.rng import RngStream
from saltlab.split import Adapter, split_at
from saltlab.trainer import TrainConfig, train_adapter

cfg, backbone, data = setup()
model = split_at(backbone, "AfterBlock2")
train_cfg = TrainConfig(max_epochs=3, seed=0)

server, _ = serve_in_thread(model)
print(f"server listening on 127.0.0.1:{server.port}")
try:
    transport = SocketTransport.connect("127.0.0.1", server.port)
    remote, report = train_adapter(model, Adapter(model.latent_shape, seed=RngStream(0).fork("adapter")),
                                   data.train, data.val, train_cfg, transport)
finally:
    server.shutdown()
    server.server_close()
print(f"networked run finished: {report.epochs} epochs, final val loss {report.history[-1].val_loss:.4f}")

local, _ = train_adapter(model, Adapter(model.latent_shape, seed=RngStream(0).fork("adapter")),
                         data.train, data.val, train_cfg)
print(f"adapter digest over the wire: {remote.digest()[:16]}")
print(f"adapter digest in process:    {local.digest()[:16]}")
