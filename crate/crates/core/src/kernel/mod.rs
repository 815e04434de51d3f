//! Layer kernels. Each forward function has a matching backward that takes
//! the upstream gradient and returns gradients for the input and any
//! parameters. All kernels are pure functions of their arguments.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{gelu_backward, gelu_forward, relu_backward, relu_forward};
pub use attention::{attention_backward, attention_forward, mix_tokens, mix_tokens_backward, AttentionCache};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeom};
pub use linear::{linear_backward, linear_forward};
pub use loss::softmax_cross_entropy;
pub use norm::{norm_backward, norm_eval_forward, norm_train_forward, NormCache, NormMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use pool::{
    avgpool2d_backward, avgpool2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    maxpool2d_backward, maxpool2d_forward, token_mean_backward, token_mean_forward,
};
