"""Fast adversarial training on a small numpy autodiff engine.

Single-step methods (FGSM-AT, FGSM-RS, FGSM-MEP, FGSM-PCO) and a PGD-AT
reference, with the attacks, metrics and experiment harness needed to study
catastrophic overfitting at desk scale.
"""
__version__ = "0.1.0"
