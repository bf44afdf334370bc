#pragma once

#include <vector>

namespace bevkd {

// Step-decayed training schedule shared by the three stages.
struct TrainSchedule {
  int epochs = 12;
  double lr = 1e-3;
  int batch_size = 8;
  double weight_decay = 0.01;
  std::vector<int> lr_decay_epochs;  // 1-based epochs at which lr *= factor
  double lr_decay_factor = 0.1;
  int eval_every = 0;  // validation cadence in epochs; 0 = final epoch only

  double lr_at_epoch(int epoch) const {
    double v = lr;
    for (int e : lr_decay_epochs)
      if (epoch >= e) v *= lr_decay_factor;
    return v;
  }
};

}  // namespace bevkd
