//! Class-discriminative saliency maps for small convolutional networks.
//!
//! The crate bundles a minimal `f64` CNN runtime ([`network`], [`tensor`]),
//! reverse-mode gradients with a finite-difference oracle ([`gradients`]),
//! the saliency methods themselves ([`saliency`]), and deterministic model
//! and image I/O ([`modelio`], [`imageio`]).
//!
//! ```
//! use smoothcam::{build_fixture, random_input, run, FixtureKind, Method, SaliencyRequest};
//!
//! let model = build_fixture(&FixtureKind::Random { seed: 7, classes: 10 }).unwrap();
//! let input = random_input(&model, 1);
//! let request = SaliencyRequest { samples: 8, seed: 42, ..SaliencyRequest::new(Method::SmoothGradCamPlusPlus) };
//! let map = run(&model, &input, &request).unwrap();
//! assert_eq!(map.display.shape(), &[16, 16]);
//! ```

pub mod error;
pub mod gradients;
pub mod imageio;
pub mod modelio;
pub mod network;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use gradients::{
    finite_diff_input_grad, finite_diff_layer_grad, grad_wrt_input, grad_wrt_layer,
    higher_order_triple, max_relative_error, ClassTarget, GradientTriple, ScoreKind, ScoreMode,
};
pub use imageio::{
    colormap, overlay, read_ppm, to_input_tensor, write_map_csv, write_ppm, RgbImage,
};
pub use modelio::{
    build_fixture, detector_input, load_model, random_input, save_model, FixtureKind,
};
pub use network::{
    forward, list_conv_layers, validate, ActivationTrace, LayerKind, LayerSpec, Model,
};
pub use saliency::{
    apply_selection, cam_map, compute_alpha, gradcam_weights, gradcampp_weights, postprocess, run,
    smooth_triple, smoothgrad_map, ActivationSource, AlphaMap, MapMeta, Method, NeuronSelection,
    SaliencyMap, SaliencyRequest, WeightVector,
};
pub use tensor::Tensor;
