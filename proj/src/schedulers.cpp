#include "cryoseg/schedulers.hpp"

#include <algorithm>
#include <cmath>

namespace cryoseg {

LrScheduler::LrScheduler(SchedulerKind kind, double lr_min, double lr_max, int total_epochs,
                         int restart_period, double gamma, int plateau_patience,
                         double plateau_factor)
    : kind_(kind),
      lr_min_(lr_min),
      lr_max_(lr_max),
      total_epochs_(std::max(total_epochs, 1)),
      restart_period_(std::max(restart_period, 1)),
      gamma_(gamma),
      plateau_patience_(plateau_patience),
      plateau_factor_(plateau_factor),
      plateau_lr_(lr_max) {}

double LrScheduler::lr(int epoch) const {
    switch (kind_) {
        case SchedulerKind::Exponential: {
            double v = lr_max_ * std::pow(gamma_, epoch);
            return std::max(v, lr_min_ * 1e-3);
        }
        case SchedulerKind::ReduceOnPlateau:
            return std::max(plateau_lr_, lr_min_ * 1e-3);
        case SchedulerKind::CosineAnnealing: {
            double t = total_epochs_ > 1 ? static_cast<double>(epoch) / (total_epochs_ - 1) : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            return lr_min_ + 0.5 * (lr_max_ - lr_min_) * (1.0 + std::cos(M_PI * t));
        }
        case SchedulerKind::CosineAnnealingRestarts: {
            int within = epoch % restart_period_;
            double t = restart_period_ > 1 ? static_cast<double>(within) / (restart_period_ - 1) : 0.0;
            return lr_min_ + 0.5 * (lr_max_ - lr_min_) * (1.0 + std::cos(M_PI * t));
        }
    }
    return lr_max_;
}

void LrScheduler::observe(double score) {
    if (score > best_score_) {
        best_score_ = score;
        since_best_ = 0;
    } else if (++since_best_ > plateau_patience_) {
        plateau_lr_ *= plateau_factor_;
        since_best_ = 0;
    }
}

}  // namespace cryoseg
