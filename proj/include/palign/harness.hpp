#pragma once

#include "palign/harness/cache.hpp"
#include "palign/harness/config.hpp"
#include "palign/harness/presets.hpp"
#include "palign/harness/report.hpp"
#include "palign/harness/run.hpp"
#include "palign/harness/synthetic.hpp"
