#pragma once

#include "cmrhead/attention.hpp"
#include "cmrhead/circuits.hpp"
#include "cmrhead/cmr.hpp"
#include "cmrhead/crp_table_io.hpp"
#include "cmrhead/export_format.hpp"
#include "cmrhead/fit.hpp"
#include "cmrhead/harness.hpp"
#include "cmrhead/icl.hpp"
#include "cmrhead/lag_profile.hpp"
#include "cmrhead/prompt.hpp"
#include "cmrhead/recall.hpp"
#include "cmrhead/toy_model.hpp"
