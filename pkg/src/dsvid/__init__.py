"""Data-scalable video delivery toolkit.

Modules:
    frames     raw 4:2:0 frames, file I/O, PSNR/SSIM
    codec      block-DCT toy codec with I/P frames and intra patches
    packetize  reversible pseudo-random element-to-packet mapping
    entropy    per-packet range coding and wire serialization
    losstrain  linear autoencoder trained under packet erasures
    delivery   quality profiles and the wait-or-decode deadline policy
    netsim     deterministic trace-driven network simulator and schemes
    cli        command-line harness (codec-eval, simulate, sweep, ...)
"""

__version__ = "0.1.0"
