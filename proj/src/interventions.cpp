#include "sgtm/interventions.hpp"

namespace sgtm {

const char* to_string(BatchLabel label) {
  switch (label) {
    case BatchLabel::kForget: return "forget";
    case BatchLabel::kRetain: return "retain";
    case BatchLabel::kUnlabeled: return "unlabeled";
  }
  return "unknown";
}

BatchLabel label_from_string(const std::string& s) {
  for (BatchLabel l : {BatchLabel::kForget, BatchLabel::kRetain, BatchLabel::kUnlabeled}) {
    if (s == to_string(l)) return l;
  }
  throw ConfigError("unknown batch label '" + s + "'");
}

const LabelActions& InterventionPlan::actions(BatchLabel label) const {
  switch (label) {
    case BatchLabel::kForget: return forget;
    case BatchLabel::kRetain: return retain;
    case BatchLabel::kUnlabeled: return unlabeled;
  }
  return unlabeled;
}

InterventionPlan make_intervention_plan(Variant variant, std::size_t n_layers,
                                        std::vector<bool> gated_layers) {
  InterventionPlan plan;
  plan.variant = variant;
  if (gated_layers.empty()) gated_layers.assign(n_layers, true);
  if (gated_layers.size() != n_layers) {
    throw ConfigError("gated layer flags must have one entry per block");
  }
  plan.gated_layers = std::move(gated_layers);
  switch (variant) {
    case Variant::kSgtm:
    case Variant::kSgtmJointProjection:
    case Variant::kSgtmJointAttention:
      plan.forget.backward_param_mask = true;
      plan.retain.forward_param_mask = true;
      break;
    case Variant::kGradientRouting:
      plan.forget.retain_activation_gate = GateMode::kGradient;
      break;
    case Variant::kActivationMasking:
      plan.forget.retain_activation_gate = GateMode::kForward;
      break;
  }
  return plan;
}

Interventions::Interventions(const ModelConfig& config, const PartitionSpec& spec,
                             std::vector<bool> gated_layers)
    : config_(config),
      spec_(spec),
      designation_(build_designation(config, spec)),
      plan_(make_intervention_plan(spec.variant, config.n_layers, std::move(gated_layers))) {}

ActivationGate Interventions::retain_gate(GateMode mode) const {
  ActivationGate gate;
  gate.mode = mode;
  gate.layers = plan_.gated_layers;
  gate.mlp_keep.assign(config_.d_mlp, 0);
  for (std::size_t j = 0; j < spec_.d_forget; ++j) gate.mlp_keep[j] = 1;
  gate.attn_keep.assign(config_.d_model, 0);
  for (std::size_t j = 0; j < spec_.h_forget * config_.d_head(); ++j) gate.attn_keep[j] = 1;
  return gate;
}

ForwardOptions Interventions::forward_options(BatchLabel label) const {
  const LabelActions& a = plan_.actions(label);
  ForwardOptions opts;
  if (a.forward_param_mask) opts.param_mask = designation_.rows_with(Tag::kForget);
  if (a.retain_activation_gate) opts.gate = retain_gate(*a.retain_activation_gate);
  return opts;
}

std::optional<Tag> Interventions::skipped_group(BatchLabel label) const {
  if (plan_.actions(label).backward_param_mask) return Tag::kRetain;
  return std::nullopt;
}

template <class T>
void Interventions::apply_gradient_mask(ParamGrads<T>& grads, BatchLabel label) const {
  if (!plan_.actions(label).backward_param_mask) return;
  if (grads.size() != designation_.size()) {
    throw ContractError("gradient map does not match designation");
  }
  const ForwardMask retain = designation_.rows_with(Tag::kRetain);
  for (std::size_t i = 0; i < grads.size(); ++i) zero_rows(grads[i], retain.zero_rows[i]);
}

template <class T>
void apply_gradient_mask(ParamGrads<T>& grads, const ParamDesignation& designation,
                         BatchLabel label, Variant variant) {
  if (label != BatchLabel::kForget || !masks_parameter_gradients(variant)) return;
  if (grads.size() != designation.size()) {
    throw ContractError("gradient map does not match designation");
  }
  const ForwardMask retain = designation.rows_with(Tag::kRetain);
  for (std::size_t i = 0; i < grads.size(); ++i) zero_rows(grads[i], retain.zero_rows[i]);
}

template void Interventions::apply_gradient_mask(ParamGrads<float>&, BatchLabel) const;
template void Interventions::apply_gradient_mask(ParamGrads<double>&, BatchLabel) const;
template void apply_gradient_mask(ParamGrads<float>&, const ParamDesignation&, BatchLabel, Variant);
template void apply_gradient_mask(ParamGrads<double>&, const ParamDesignation&, BatchLabel,
                                  Variant);

}  // namespace sgtm
