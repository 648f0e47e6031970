"""Perception-aware sampling MPC for a simulated racing quadrotor.

A deterministic desk-scale testbed: rigid-body quadrotor dynamics, a
pinhole camera with an analytic optical-flow oracle and geometric gate
detector, a small from-scratch neural network that learns single-pixel
flow dynamics, a sampling-based racing controller that can trade speed
for target visibility, and a particle-filter state estimator.
"""

from .dynamics import (ControlInput, RobotState, VehicleParams, GRAVITY,
                       quat_derivative, robot_derivative, rotation_matrix, step)
from .vision import (CameraModel, Detection, FlowVector, Gate, PixelState,
                     detect_gate, flow_oracle, project, square_gate,
                     visibility_fraction)
from .neural import (AdamState, NetworkSpec, NetworkWeights, adam_step, forward,
                     init_weights, load_weights, loss_and_grad, save_weights)
from .dof import (BatchFlowPredictor, CombinedState, DofDataset, collect_dataset,
                  combined_derivative, dof_predict, load_dataset, pixel_derivative,
                  polar_to_euler, rollout_pixel, save_dataset, split_by_laps,
                  train_dof)
from .control import (CostParams, MppiConfig, RaceSetup, RolloutEngine,
                      build_setup, h_path_indicator, mppi_step, mppi_weights,
                      pixel_cost, pixelmpc_loop, robot_cost, rollout)
from .estimation import (FilterConfig, ImuReading, ParticleFilter, Particles,
                         estimate, motion_update, resample, sensor_update,
                         simulate_imu)
from .course import GateCourse, default_course, load_course, save_course, straight_course
from .config import ExperimentConfig, load_experiment_config
from .experiment import lap_seed, run_experiment
from .metrics import aee, total_variation, visibility_metrics
from .bench import bench_dof

__version__ = "0.1.0"
