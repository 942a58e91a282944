#pragma once

#include "palign/rmzoo/artifact.hpp"
#include "palign/rmzoo/heads.hpp"
#include "palign/rmzoo/pref.hpp"
#include "palign/rmzoo/scoring.hpp"
#include "palign/rmzoo/train.hpp"
