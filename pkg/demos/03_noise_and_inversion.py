"""Gaussian noise on the features as a privacy knob.

An eavesdropper trains a decoder that maps clean features back to images,
using its own samples from the same distribution. Adding noise before
transmission degrades its reconstructions (lower SSIM). The adapter is
trained under that noise, so the task keeps its accuracy.

    python demos/03_noise_and_inversion.py [backbone.smdl]
"""

from _common import setup

from saltlab.channel import ChannelSpec
from saltlab.data import generate_surrogate
from saltlab.inversion import evaluate_attack, train_inverter
from saltlab.rng import RngStream
from saltlab.split import Adapter, split_at
from saltlab.trainer import TrainConfig, evaluate, train_adapter

cfg, backbone, data = setup()
model = split_at(backbone, "AfterBlock2")
surrogate = generate_surrogate(cfg.dataset, cfg.data_seed, cfg.attack.surrogate_per_class)
decoder = train_inverter(model, surrogate, cfg.attack, 0)
attack_set = data.test.subset(slice(0, 200))

print(" sigma  acc(none)  acc(adapter)  ssim(none)  ssim(adapter)")
for sigma in (0.0, 0.5, 1.0, 1.5):
    channel = ChannelSpec.gaussian_noise(sigma)
    adapter = Adapter(model.latent_shape, "residual", RngStream(0).fork("adapter"))
    adapter, _ = train_adapter(model, adapter, data.train, data.val, TrainConfig(seed=0, forward_channel=channel))
    acc_none = evaluate(model, None, data.test, channel, 0).accuracy
    acc_salt = evaluate(model, adapter, data.test, channel, 0).accuracy
    ssim_none = evaluate_attack(decoder, model, None, attack_set, [sigma], 0)[0].mean_ssim
    ssim_salt = evaluate_attack(decoder, model, adapter, attack_set, [sigma], 0)[0].mean_ssim
    print(f" {sigma:<6} {acc_none:9.3f}  {acc_salt:12.3f}  {ssim_none:10.3f}  {ssim_salt:13.3f}")
