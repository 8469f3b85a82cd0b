"""Instance-level moving-object segmentation from images and events, at toy scale.

Modules: ``events`` (event I/O and voxel grids), ``tensor`` (reverse-mode
autodiff on numpy), ``synth`` (scene and event simulator), ``model``,
``losses``, ``train``, ``infer``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
