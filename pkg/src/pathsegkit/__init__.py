"""pathsegkit: desk-scale tooling for text-prompted pathology image segmentation.

Subpackages/modules:
  taxonomy   hierarchical semantic labels and text-prompt templating
  pipeline   magnification normalization, sliding-window patching, manifests
  metrics    Dice, object-characteristic metrics, bootstrap CIs, trend bins
  boxes      oracle box prompts derived from ground-truth masks
  model      reference text-prompted segmentation decoder (numpy, trainable)
  explain    blur-perturbation feature importance, MIL aggregation, CAMs
  synthetic  shapes-on-noise corpus generators for tests and demos
  cli        command-line entry points
"""

__version__ = "0.1.0"
