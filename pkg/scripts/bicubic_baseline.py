"""PSNR of plain bicubic upsampling on the overfit patches, per texture."""

import numpy as np

from ssrde.autodiff import Tensor, no_grad
from ssrde.experiments import overfit_config
from ssrde.resize import bicubic_upsample
from ssrde.training import batch_psnr, load_dataset

for texture in ("noise", "gradients"):
    cfg = overfit_config(texture=texture)
    b = load_dataset(cfg).data
    with no_grad():
        up = bicubic_upsample(Tensor(np.concatenate([b.lr_left, b.lr_right])), cfg.scale).data
    print(f"{texture:10s} bicubic PSNR {batch_psnr(up, b.hr_left, b.hr_right):.2f} dB")
