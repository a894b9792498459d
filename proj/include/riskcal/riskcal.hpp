#pragma once

#include "riskcal/bounds.hpp"
#include "riskcal/calibrate.hpp"
#include "riskcal/core.hpp"
#include "riskcal/data.hpp"
#include "riskcal/error.hpp"
#include "riskcal/estimators.hpp"
#include "riskcal/experiment.hpp"
#include "riskcal/folds.hpp"
#include "riskcal/models.hpp"
#include "riskcal/rng.hpp"
