/// @file swejudge.hpp
/// Umbrella header: pulls in the whole evaluation library.
#pragma once

#include "swejudge/backend.hpp"
#include "swejudge/baselines.hpp"
#include "swejudge/core.hpp"
#include "swejudge/digest.hpp"
#include "swejudge/ensemble.hpp"
#include "swejudge/stats.hpp"
#include "swejudge/strategies.hpp"
