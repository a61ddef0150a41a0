from .control import ControlBranch, ControlledDenoiser, attach_control, condition_planes
from .sampling import edge_correlation, generate_hard, reverse_sample
from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .train import (
    evaluate_loss,
    from_model_range,
    noise_prediction_loss,
    sample_noise_batch,
    to_model_range,
    train_control_step,
    train_denoiser_step,
)
from .unet import Denoiser
