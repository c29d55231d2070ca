"""RGB 6D object pose estimation with grid proposals and attention-based refinement."""
