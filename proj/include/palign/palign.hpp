#pragma once

#include "palign/common.hpp"
#include "palign/models.hpp"
#include "palign/corpus.hpp"
#include "palign/rmzoo.hpp"
#include "palign/guidance.hpp"
#include "palign/metrics.hpp"
#include "palign/harness.hpp"
