//! Part-guided relational transformer for fine-grained recognition, sized
//! for CPU experiments.

pub mod tensor;
pub mod discovery;
pub mod feature;
pub mod posenc;
pub mod transformer;
pub mod conv_equiv;
pub mod data;
pub mod model;
