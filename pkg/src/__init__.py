"""Counterfactual explanations for image classifiers via deep model inversion."""
