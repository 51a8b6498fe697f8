"""Event-camera simulation and event-to-voxel shape reconstruction.

The package is organized as a small numpy library:

- ``events``: event streams, validation, frame binning, the EVT1 file format
- ``voxel``: meshes, voxelization, occupancy grids, metrics, the VOX1 format
- ``nn``: 3D convolutional layers with explicit forward/backward passes
- ``checkpoint``: flat named-tensor persistence (CKP1 format)
- ``model``: encoder/decoder reconstruction network built from ``nn`` layers
- ``train``: AdamW optimizer, training loop, evaluation reports
- ``sim``: orbital camera trajectory, Lambertian raycaster, event synthesis
- ``cli``: dataset/run manifests and the ``ev2vox`` command-line entry point
"""

__version__ = "0.1.0"
