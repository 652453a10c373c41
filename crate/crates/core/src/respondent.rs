//! The answering side of a turn. Refiners only see this trait, so the
//! target image stays with the simulator.

use crate::gallery::ImageId;
use crate::oracles::{OracleResult, UserSimulator};
use crate::image::GeneratedImage;

pub trait Respondent {
    fn answer(&self, question: &str) -> OracleResult<String>;

    fn describe_differences(&self, generated: &GeneratedImage, question: &str) -> OracleResult<String>;
}

/// Routes questions to a [`UserSimulator`] that knows the target.
pub struct SimulatedUser<'a> {
    simulator: &'a dyn UserSimulator,
    target: &'a ImageId,
}

impl<'a> SimulatedUser<'a> {
    pub fn new(simulator: &'a dyn UserSimulator, target: &'a ImageId) -> Self {
        SimulatedUser { simulator, target }
    }
}

impl Respondent for SimulatedUser<'_> {
    fn answer(&self, question: &str) -> OracleResult<String> {
        self.simulator.answer(self.target, question)
    }

    fn describe_differences(&self, generated: &GeneratedImage, question: &str) -> OracleResult<String> {
        self.simulator
            .describe_differences(self.target, &generated.handle, question)
    }
}
