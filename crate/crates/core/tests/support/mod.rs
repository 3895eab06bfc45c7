pub mod gradcheck;
pub mod metrics;
pub mod ssca;
