//! Interactive object segmentation that adapts to user corrections.
//!
//! A small encoder-decoder network maps an RGB image plus two click-guidance
//! channels to a foreground probability map. Corrections are turned into a
//! training signal at test time: single-image adaptation fine-tunes a working
//! copy of the parameters after every click, sequence adaptation takes one
//! step per finished image, and an importance-weighted penalty keeps both
//! close to the trained snapshot.
//!
//! ```
//! use clickadapt::{Architecture, SegNet, Click, model_input, Tensor};
//!
//! let net = SegNet::build(Architecture::default(), 7).unwrap();
//! let image = Tensor::full(&[3, 64, 64], 0.5);
//! let x = model_input(&image, &[Click::positive(32, 32)], 3).unwrap();
//! let pred = net.predict(&x).unwrap();
//! assert_eq!(pred.binary.shape(), &[64, 64]);
//! ```

pub mod adapt;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod guidance;
pub mod losses;
pub mod ops;
pub mod params;
pub mod segnet;
pub mod tensor;
pub mod usersim;

pub use adapt::{
    adam_step, combined_adapt, model_input, sequence_adapt_step, single_image_adapt, train_base, AdamState,
    AdaptConfig, AdaptLog, Anchor, ImageRecord, Mode, SequenceAdapter, Session, TrainConfig,
};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use eval::{clicks_at_q, evaluate_sequence, iou, synth_dataset, Dataset, EvalReport, SynthSpec};
pub use graph::{Gradients, Graph, Var};
pub use guidance::{encode_guidance, update_corrections, Click, CorrectionState, Label};
pub use losses::{adapt_loss, ce_loss, gce_loss, mas_importance, mas_penalty, AdaptLossConfig, ImportanceSet};
pub use params::ParamSet;
pub use segnet::{Architecture, Prediction, SegNet};
pub use tensor::{Tensor, TensorError};
pub use usersim::simulate_click;
