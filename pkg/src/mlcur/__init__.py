"""Curriculum-weighted mixtures of linear experts for imitation learning."""
from .promp import BasisConfig, ProMPEncoder, Trajectory, build_basis, project_trajectory, reconstruct
from .mixture import CurriculumMoE, ContextComponent, GatingPrior, LinearGaussianExpert
from .curriculum import EntropyBudget, solve_alpha_dual, responsibilities, weight_entropy
from .trainer import MLCurRegressor, TrainConfig, train_ml_cur, train_single
from .baselines import EMMixtureOfExperts, KNNPolicy, train_em, knn_predict
from .reacher import ReacherWorld, forward_kinematics, collision_check, generate_reacher_dataset
from .evaluation import AblationSpec, EvalReport, evaluate_model, run_experiment

__version__ = "0.1.0"
