"""Moving-target defense for small dense classifiers.

A base classifier spawns a pool of perturbed-and-retrained student
models; an OOD-gated scheduler routes each query to a suitable student;
pools expire on a query budget and are swapped from a pre-generated
buffer. Evaluation utilities measure robustness, attack transferability,
and scheduling precision against reference evasion attacks.
"""

from .attacks import (AdvExample, AttackConfig, cw_config, cw_l2, fgsm,
                      fgsm_config, gen_attack_set, pgd, pgd_config, spsa,
                      spsa_config)
from .data import (Dataset, TransformSpec, apply_transform, gen_blobs,
                   load_dataset_csv, save_dataset_csv, validate_transformed)
from .errors import (AttackAborted, BudgetExhausted, GenerationFailure,
                     NumericOverflow, RejectedInput)
from .evaluate import (AtrMatrix, EvalReport, ExperimentProfile, atr, frq,
                       robustness_table, scheduling_precision, sweep)
from .models import (Model, accuracy, forward, grad_loss, init_model,
                     load_model, predict, predict_proba, save_model, train)
from .ood import (OodDetector, SchedulerKind, extract_features, fit_detector,
                  is_adversarial, load_detector, ood_score, save_detector,
                  schedule_most_confident, schedule_ood,
                  threshold_from_percentile)
from .pool import (GenConfig, StudentPool, StudentRecord, default_mixture,
                   default_transforms, generate_pool, generate_student,
                   load_pool, perturb_weights, retrain, save_pool)
from .service import (QueryRecord, ServiceState, compute_qmax, handle_query,
                      read_audit_csv, renew_pool, serve)

__version__ = "0.1.0"
