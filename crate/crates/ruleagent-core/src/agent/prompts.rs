//! Prompt builders for planning and the two reflections, plus the renderings
//! of memory content they embed.

use crate::eval::EvalResult;
use crate::memory::{ActionRecord, ConfidenceEntry};
use crate::scalar::Scalar;

/// Role definition sent as the system message of every call.
pub const DEFAULT_PROFILE: &str = "You are an expert in data denoising. Your goal is to enhance the recommendation model by filtering out noisy interaction data, ensuring the model performs optimally. Your task involves assigning confidence scores to the interactions and deriving the appropriate denoising rules. Interactions with higher confidence will be kept for model training, while those with lower confidence will be discarded.";

/// The rule memory's starting point: the loss-value heuristic every later
/// revision refines.
pub const INITIAL_RULE_TEXT: &str = "Rule-1(Value-Related): The confidence of the interaction data is related to the loss value of the interaction data, and the one with a large loss is more likely to be a noisy sample.\n";

/// Confidence-memory sentence for one interaction.
pub fn render_confidence_entry(entry: &ConfidenceEntry) -> String {
    format!(
        "The noise confidence level for the interaction between user {} and item {} is evaluated as {:.4}. The reason is: {}",
        entry.user, entry.item, entry.score, entry.reason
    )
}

/// Action-memory sentence for one record, with the evaluation outcome
/// appended when one exists.
pub fn render_action_record(record: &ActionRecord) -> String {
    let mut line = format!(
        "The {}-th action is chosen as {}, and the reason is: {}",
        record.index,
        record.kind.name(),
        record.reason
    );
    if let Some(outcome) = &record.eval_outcome {
        line.push_str(&format!(" Evaluation outcome: {}.", render_eval(outcome)));
    }
    line
}

pub fn render_eval(outcome: &EvalResult) -> String {
    outcome.render()
}

/// Compact rendering of one interaction's recorded (epoch, loss) series.
pub fn render_loss_series<S: Scalar>(series: &[(usize, S)]) -> String {
    let parts: Vec<String> = series
        .iter()
        .map(|(epoch, loss)| format!("epoch {epoch}: {:.6}", loss.as_f64()))
        .collect();
    format!("[{}]", parts.join(", "))
}

/// The multi-path planning prompt: one path per memory store, the action
/// menu, and the strict response format line.
pub fn planning_prompt(
    confidence_rendering: &str,
    rules_text: &str,
    actions_rendering: &str,
) -> String {
    format!(
        "You have three potential planning paths for deciding the next step:\n\
1. Current Confidence-Based Planning: Current confidence scores are:\n{confidence_rendering}\n\
Examine the confidence levels and their associated reasons stored in your confidence data. Compare these confidence levels with the model's training results. Determine the most suitable next step and explain your reasoning.\n\
2. Current Rule-Based Planning: The current rules are:\n{rules_text}\n\
Refer to the rules stored in your current rule set. Compare the model training results against these rules. Decide on the most appropriate next step and provide the rationale.\n\
3. Historical Action-Based Planning: The historical actions taken are:\n{actions_rendering}\n\
Analyze past actions and their outcomes. Use these insights to determine the most suitable next step and explain why.\n\
The available actions are:\n\
a. Confidence Reflection. This action is to update the confidence score and corresponding explanation of samplings. You will choose this action when the current confidence scores assigned to the sampled data are found to be inaccurate or insufficient.\n\
b. Rule Reflection. This action is to update the denoising rule. You will choose this action when the existing denoising rule is either incorrect or can be further refined.\n\
c. LossEraser Training. Use the confidence memory to filter data for the next recommendation training phase, then you can get new recommendation model parameters.\n\
d. Model Evaluation. Evaluate the current performance of the recommendation model to show whether it has improved or worsened.\n\
Compare the decisions with these three planning paths, then decide on the most suitable next step and explain your reasoning.\n\
Please provide a response that strictly follows the response format:\n\
The next action is: <a/b/c/d>. The reason for this decision is: <Your Explanation>."
    )
}

/// Per-sample confidence reflection prompt.
pub fn confidence_reflection_prompt(
    rules_text: &str,
    user: usize,
    item: usize,
    loss_series: &str,
    prior_score: f64,
    prior_reason: &str,
) -> String {
    format!(
        "Please provide the updated confidence score (0-2, 0-1 means noisy sample, 1-2 means clean sample) and explain why you assigned this updated score.\n\
The denoising rule is:\n{rules_text}\
User Index is {user}, Item Index is {item}, Historical Loss is {loss_series}.\n\
You previously provided: The confidence score is {prior_score:.4}. The explanation was: {prior_reason}\n\
Please analyze the reason and update your confidence score and explanation accordingly.\n\
The response format should be: The confidence score is <0-2>. The explanation: <Your Explanation>."
    )
}

/// Rule reflection prompt: the four analysis steps over the sampled
/// confidence memory and the current hierarchy.
pub fn rule_reflection_prompt(
    rules_text: &str,
    confidence_rendering: &str,
    update_reason: &str,
) -> String {
    format!(
        "The current denoising rules are:\n{rules_text}\
The current confidence scores and reasons are:\n{confidence_rendering}\n\
The reason for updating the denoising rules was: {update_reason}\n\
Based on this information, follow these steps:\n\
1. Analyze current confidence scores and reasons, and identify which interactions are considered noisy and which are malicious, and summarize the reasoning for categorizing these interactions as noisy or malicious.\n\
2. Based on this analysis, compare the current denoising rule and update the denoising rule. Organize the rules hierarchically with descriptive classification labels to ensure they are clear, concise, and actionable, such as \"Rule-1(Value-Related)\", \"Rule-1.1(Label)\", \"Rule-1.1.1(Label)\", ..., \"Rule-N(Label)\", \"Rule-N.1(Label)\", etc., to organize different levels of rules.\n\
3. Merge similar rules, ensuring the rules are free of redundancy.\n\
4. Finally, output the updated denoising rules, and the response format should be strictly as follows:\n\
The updated denoising rules are: <New Rules>."
    )
}

/// Correction note appended when a response failed to parse and the call is
/// retried once.
pub fn format_correction(expected_format: &str) -> String {
    format!(
        "\nYour previous response did not follow the required format. Respond exactly in the format:\n{expected_format}"
    )
}
