#pragma once

#include <string>
#include <vector>

namespace revattn {

// One evaluation item: the prompt's token ids and the id the model should
// predict next.
struct Example {
  std::vector<int> prompt;
  int target = 0;
  std::string label;  // optional, used in error messages and exports
};

}  // namespace revattn
