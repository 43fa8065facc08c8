"""Print the layer-by-layer shape trace of every network for a profile.

    python3 scripts/architecture_trace.py --profile full
"""
import argparse

import torch

from tissue_manifold.latent import MappingNetwork
from tissue_manifold.networks import PROFILES, Discriminator, Encoder, Generator


def fmt(shape):
    return "-" if shape is None else "x".join(str(s) for s in shape)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", choices=sorted(PROFILES), default="full")
    args = ap.parse_args()
    p = PROFILES[args.profile]
    torch.manual_seed(0)
    r = p.base_resolution
    nets = [
        ("mapping", MappingNetwork(p.latent_dim), torch.zeros(1, p.latent_dim)),
        ("generator", Generator(p), torch.zeros(1, p.n_style_sites, p.latent_dim)),
        ("critic", Discriminator(p), torch.zeros(1, 3, r, r)),
        ("encoder", Encoder(p), torch.zeros(1, 3, r, r)),
    ]
    with torch.no_grad():
        for name, net, x in nets:
            trace = []
            net(x, trace=trace)
            n_params = sum(t.numel() for t in net.parameters())
            print(f"{name} ({n_params:,} parameters)")
            for kind, before, after in trace:
                print(f"  {kind:<10} {fmt(before):>14} -> {fmt(after)}")


if __name__ == "__main__":
    main()
