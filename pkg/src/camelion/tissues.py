"""The five-class tissue model shared by every module.

Label 0 is always background. The non-background classes are numbered so
that smaller indices win deterministic tie-breaks throughout the toolkit.
"""

CSF = 1
VENTRICLES = 2
GRAY_MATTER = 3
WHITE_MATTER = 4
BRAINSTEM = 5

NUM_CLASSES = 5

CLASS_NAMES = {
    CSF: "csf",
    VENTRICLES: "ventricles",
    GRAY_MATTER: "gray_matter",
    WHITE_MATTER: "white_matter",
    BRAINSTEM: "brainstem",
}

# CSF is excluded from default evaluation reports: atlas-style CSF labels do
# not cover sulcal CSF, so its Dice is not comparable across methods.
DEFAULT_EVAL_CLASSES = (VENTRICLES, GRAY_MATTER, WHITE_MATTER, BRAINSTEM)


def class_name(k: int) -> str:
    """Human-readable name for class index ``k`` (``background`` for 0)."""
    if k == 0:
        return "background"
    return CLASS_NAMES.get(k, f"class_{k}")
