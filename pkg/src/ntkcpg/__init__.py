"""NTK-based constrained REINFORCE."""
