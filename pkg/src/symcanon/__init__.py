"""symcanon: align and canonicalize small MLPs under permutation/scaling symmetries.

The package is organized bottom-up:

- ``tensor``     dense float64 tensors, a reverse-mode tape, AdamW
- ``nets``       dense networks, SIREN image fitting, checkpoints, glyph data
- ``symmetry``   permutation + neuron-scaling group actions on weights
- ``assignment`` linear assignment (O(n^3) solver + factorial oracle)
- ``alignment``  sign-aware weight matching by coordinate descent
- ``interp``     linear interpolation curves, barriers, rank correlation
- ``metagraph``  networks as graphs + scale-equivariant message passing
- ``autoencoder``latent canonicalization trained with functional losses
- ``cli``        command line front end over the above
"""

__version__ = "0.1.0"
