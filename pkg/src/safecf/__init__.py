"""safecf: saliency-guided counterfactual explanations for deep-RL agents."""

__version__ = "0.1.0"
