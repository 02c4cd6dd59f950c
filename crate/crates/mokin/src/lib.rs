//! Motion retargetting between skeletons with differing bone proportions.
//!
//! The crate trains a recurrent encoder/decoder whose final layer is a
//! differentiable forward-kinematics pass: the network predicts per-joint
//! unit quaternions and root velocities, and joint positions are recovered
//! by rotating the target skeleton's bone offsets. Bone lengths are thereby
//! preserved by construction, which is the property that separates this
//! model from the direct-coordinate baselines in [`baselines`].
//!
//! Training is unsupervised: no paired motion between skeletons is needed.
//! The objective combines cycle consistency (retarget A -> B -> A and
//! reconstruct), an adversarial realism term on the retargetted motion, a
//! bone-twist penalty, and temporal smoothing. See [`training`].
//!
//! Module map:
//! - [`quat`]: quaternion algebra with analytic gradients.
//! - [`kinematics`]: skeletons, forward kinematics, world reconstruction.
//! - [`motion`]: clip representation, preprocessing, BVH/JSON/CSV io.
//! - [`neural`]: tensors, the reverse-mode tape, GRU, Adam.
//! - [`model`]: the retargetting encoder/decoder network.
//! - [`training`]: losses, the discriminator, and the training loop.
//! - [`baselines`]: copy-rotation and direct-coordinate baselines.
//! - [`eval`]: synthetic dataset generation and evaluation metrics.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kinematics;
pub mod model;
pub mod motion;
pub mod neural;
pub mod quat;
pub mod training;

pub use error::{Error, Result};
