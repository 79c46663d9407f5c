#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"

namespace sgtm {

enum class BatchLabel : std::uint8_t { kForget, kRetain, kUnlabeled };

const char* to_string(BatchLabel label);
BatchLabel label_from_string(const std::string& s);

// What happens to a batch of one label.
struct LabelActions {
  bool forward_param_mask = false;   // zero forget-designated parameters in the forward pass
  bool backward_param_mask = false;  // zero retain-designated parameter gradients
  std::optional<GateMode> retain_activation_gate;  // gate retain hidden units / heads
};

// Per-label training interventions of one variant.
//
//   variant            FORGET                       RETAIN              UNLABELED
//   sgtm (all three)   mask retain param grads      mask forget params  -
//   gradient_routing   mask retain activation grads -                   -
//   activation_mask.   zero retain activations      -                   -
struct InterventionPlan {
  Variant variant = Variant::kSgtm;
  LabelActions forget;
  LabelActions retain;
  LabelActions unlabeled;
  // Blocks whose activations are gated (routing variants); all by default.
  std::vector<bool> gated_layers;

  const LabelActions& actions(BatchLabel label) const;
};

InterventionPlan make_intervention_plan(Variant variant, std::size_t n_layers,
                                        std::vector<bool> gated_layers = {});

class Interventions {
 public:
  Interventions(const ModelConfig& config, const PartitionSpec& spec,
                std::vector<bool> gated_layers = {});

  const ParamDesignation& designation() const noexcept { return designation_; }
  const InterventionPlan& plan() const noexcept { return plan_; }
  const PartitionSpec& spec() const noexcept { return spec_; }

  // Forward-pass options for a batch: parameter mask and/or activation gate.
  ForwardOptions forward_options(BatchLabel label) const;

  // Zeroes retain-designated gradients when the label calls for it.
  template <class T>
  void apply_gradient_mask(ParamGrads<T>& grads, BatchLabel label) const;

  // Designation group whose optimizer update is skipped for this label.
  std::optional<Tag> skipped_group(BatchLabel label) const;

  // Activation gate marking retain hidden units and retain heads.
  ActivationGate retain_gate(GateMode mode) const;

 private:
  ModelConfig config_;
  PartitionSpec spec_;
  ParamDesignation designation_;
  InterventionPlan plan_;
};

// Free-function forms.
template <class T>
void apply_gradient_mask(ParamGrads<T>& grads, const ParamDesignation& designation,
                         BatchLabel label, Variant variant = Variant::kSgtm);

}  // namespace sgtm
