"""gridsurf: scene reconstruction onto dense occupancy + radiance grids.

Instead of comparing alpha-composited pixel colors against the reference
image, training scores every marched sample as an independent surface
candidate against the pixel it came from, weighted by the free-flight
probability of reaching it. Occupancies are pushed toward 0/1, so a surface
can be pulled out of the grid at any iteration (first-hit rendering or
marching cubes), with brute-force oracles verifying the gradient semantics.
"""

from .background import BackgroundStrategy, effective_alphas, sample_background
from .field import (Bounds, FieldPoint, OccupancyField, RadianceGrid,
                    load_fields, save_fields)
from .loss import (ColorMetric, LossReport, RelaxedState, color_loss,
                   nerf_loss, radiance_field_loss, relaxed_loss,
                   update_challenge)
from .march import SampleBatch, intersect_bounds, march, synthetic_batch
from .regularize import (LaplacianSchedule, WarmStartSchedule,
                         clamp_occupancy, laplacian_penalty, schedule_weight)
from .render import (Mesh, chamfer, extract_mesh, level_set_stability, psnr,
                     render_surface, render_volume)
from .sensor import (Camera, Dataset, PrimitiveScene, Primitive, Ray,
                     RayBatch, RigSpec, generate_dataset, pixel_ray,
                     trace_ground_truth)
from .train import (Checkpoint, RelaxConfig, TrainConfig, Trainer,
                    init_fields, train)

__version__ = "0.1.0"
