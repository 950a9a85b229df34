//! Hierarchical generative digital twin of a sliced core-network control
//! plane.
//!
//! * [`netsim`] emulates admission control for four slices and renders the
//!   resulting control-plane signaling.
//! * [`msgcodec`] defines the message schema, tokenization and datasets.
//! * [`nncore`] is the small neural substrate shared by every learned part.
//! * [`msgtwin`] is the message-level twin (Transformer and LSTM baseline).
//! * [`policytwin`] is the policy-level twin: GAN augmentation, behavior
//!   cloning and actor-critic optimization warm-started from the clone.

pub mod msgcodec;
pub mod msgtwin;
pub mod netsim;
pub mod nncore;
pub mod policytwin;
