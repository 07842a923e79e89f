#pragma once

#include "clipcl/method_config.hpp"
#include "clipcl/parameters.hpp"

namespace clipcl {

/// Mean-IMM merge: (1 - alpha) * old + alpha * new on the towers selected
/// by `option` (WM: both, IO: image, TO: text). Unselected towers and the
/// logit scale are copied from `params_old`.
ParameterSet imm_merge(const ParameterSet& params_old, const ParameterSet& params_new, double alpha,
                       UpdateOption option = UpdateOption::WM);

}  // namespace clipcl
