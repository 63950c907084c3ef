#pragma once

#include "cprl/random.hpp"
#include "cprl/surrogate.hpp"
#include "cprl/classifier.hpp"
#include "cprl/conformal.hpp"
#include "cprl/scoring.hpp"
#include "cprl/policy.hpp"
#include "cprl/rl.hpp"
#include "cprl/stats.hpp"
#include "cprl/harness.hpp"
